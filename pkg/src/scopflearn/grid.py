"""Static network model and linear sensitivity factors.

The DC flow convention used throughout is the withdrawal form

    f = PTDF @ (d_bus - B @ g)

where ``d_bus`` aggregates load units onto buses and ``B`` is the
generator-bus incidence matrix.  The PTDF column of the slack bus is
identically zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

ISLANDING_TOL = 1e-6

CASE_SCHEMA_KEYS = {"buses", "generators", "lines", "loads", "slack_bus", "penalty_Pi", "base_mva"}


def _asarray(x, dtype=float) -> np.ndarray:
    a = np.asarray(x, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GridCase:
    """Immutable per-unit network description.

    Arrays are index-aligned: generator i lives at bus ``gen_bus[i]`` with
    bounds ``glb[i] <= g_i <= gub0[i]``, linear cost ``c0[i]`` and droop
    parameter ``gamma[i]``; load unit j draws ``d0[j]`` at ``load_bus[j]``.
    """

    n_bus: int
    gen_bus: np.ndarray
    glb: np.ndarray
    gub0: np.ndarray
    c0: np.ndarray
    gamma: np.ndarray
    line_from: np.ndarray
    line_to: np.ndarray
    susceptance: np.ndarray
    flb: np.ndarray
    fub: np.ndarray
    load_bus: np.ndarray
    d0: np.ndarray
    slack_bus: int
    Pi: float = 1500.0
    base_mva: float = 100.0
    name: str = field(default="case", compare=False)

    def __post_init__(self):
        for attr in ("gen_bus", "load_bus", "line_from", "line_to"):
            object.__setattr__(self, attr, _asarray(getattr(self, attr), dtype=int))
        for attr in ("glb", "gub0", "c0", "gamma", "susceptance", "flb", "fub", "d0"):
            object.__setattr__(self, attr, _asarray(getattr(self, attr)))
        self._validate()

    def _validate(self):
        n = self.n_bus
        if n < 2:
            raise DataError("case needs at least 2 buses")
        if not (0 <= self.slack_bus < n):
            raise DataError(f"slack_bus {self.slack_bus} out of range for {n} buses")
        for name, idx in (("gen_bus", self.gen_bus), ("load_bus", self.load_bus),
                          ("line_from", self.line_from), ("line_to", self.line_to)):
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise DataError(f"{name} contains bus index outside 0..{n - 1}")
        shapes = {
            "generators": (self.gen_bus, self.glb, self.gub0, self.c0, self.gamma),
            "lines": (self.line_from, self.line_to, self.susceptance, self.flb, self.fub),
            "loads": (self.load_bus, self.d0),
        }
        for group, arrays in shapes.items():
            if len({a.shape for a in arrays}) != 1:
                raise DataError(f"inconsistent {group} array lengths")
        if self.n_gen == 0 or self.n_line == 0 or self.n_load == 0:
            raise DataError("case needs at least one generator, line and load")
        if np.any(self.glb > self.gub0):
            raise DataError("generator lower bound exceeds upper bound")
        if np.any(self.susceptance <= 0):
            raise DataError("susceptance must be positive")
        if np.any(self.flb > 0) or np.any(self.fub < 0):
            raise DataError("flow limits must satisfy flb <= 0 <= fub")
        if np.any(self.line_from == self.line_to):
            raise DataError("self-loop line")
        if not (self.Pi > 0):
            raise DataError("penalty_Pi must be positive")
        if not _connected(self.n_bus, self.line_from, self.line_to):
            raise DataError("disconnected network")

    @property
    def n_gen(self) -> int:
        return self.gen_bus.size

    @property
    def n_line(self) -> int:
        return self.line_from.size

    @property
    def n_load(self) -> int:
        return self.load_bus.size

    @property
    def ghat0(self) -> np.ndarray:
        """Base generator capacities gub0 - glb."""
        return self.gub0 - self.glb


@dataclass(frozen=True)
class LinearFactors:
    """PTDF/LODF matrices plus incidence maps derived from a GridCase.

    ``lodf[:, k]`` redistributes the pre-outage flow of line k onto the other
    lines; its diagonal is -1 so post-outage flow on the outaged line is zero.
    ``islanding[k]`` marks bridge lines whose outage would split the network;
    their LODF columns are invalid and zeroed.
    """

    ptdf: np.ndarray
    lodf: np.ndarray
    islanding: np.ndarray
    gen_incidence: np.ndarray
    load_incidence: np.ndarray

    def __post_init__(self):
        for attr in ("ptdf", "lodf", "gen_incidence", "load_incidence"):
            object.__setattr__(self, attr, _asarray(getattr(self, attr)))
        object.__setattr__(self, "islanding", _asarray(self.islanding, dtype=bool))


@dataclass(frozen=True)
class ContingencySet:
    """Admissible generator and line outage indices after screening."""

    gen_contingencies: tuple
    line_contingencies: tuple

    @property
    def n_gen(self) -> int:
        return len(self.gen_contingencies)

    @property
    def n_line(self) -> int:
        return len(self.line_contingencies)


def _connected(n_bus: int, line_from: np.ndarray, line_to: np.ndarray) -> bool:
    adj = [[] for _ in range(n_bus)]
    for a, b in zip(line_from, line_to):
        adj[a].append(b)
        adj[b].append(a)
    seen = np.zeros(n_bus, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                stack.append(v)
    return bool(seen.all())


def branch_incidence(case: GridCase) -> np.ndarray:
    """Signed line-bus incidence A: +1 at the from bus, -1 at the to bus."""
    A = np.zeros((case.n_line, case.n_bus))
    A[np.arange(case.n_line), case.line_from] = 1.0
    A[np.arange(case.n_line), case.line_to] = -1.0
    return A


def gen_to_bus_matrix(case: GridCase) -> np.ndarray:
    B = np.zeros((case.n_bus, case.n_gen))
    B[case.gen_bus, np.arange(case.n_gen)] = 1.0
    return B


def load_to_bus_matrix(case: GridCase) -> np.ndarray:
    L = np.zeros((case.n_bus, case.n_load))
    L[case.load_bus, np.arange(case.n_load)] = 1.0
    return L


def bus_demand(case: GridCase, d: np.ndarray) -> np.ndarray:
    """Aggregate per-load-unit demand onto buses; supports a leading batch axis."""
    L = load_to_bus_matrix(case)
    return np.asarray(d) @ L.T


def build_ptdf(case: GridCase) -> np.ndarray:
    """Withdrawal-convention PTDF: f = ptdf @ w for balanced withdrawals w.

    Factorizes the reduced bus-susceptance matrix (slack row/column removed)
    against the branch-susceptance incidence rows, then negates so positive
    entries correspond to bus withdrawals rather than injections.
    """
    A = branch_incidence(case)
    b = case.susceptance
    Bbus = A.T @ (b[:, None] * A)
    keep = np.arange(case.n_bus) != case.slack_bus
    reduced = Bbus[np.ix_(keep, keep)]
    rows = (b[:, None] * A)[:, keep]
    try:
        sol = np.linalg.solve(reduced, rows.T).T
    except np.linalg.LinAlgError as exc:
        raise DataError("disconnected network") from exc
    ptdf = np.zeros((case.n_line, case.n_bus))
    ptdf[:, keep] = -sol
    return ptdf


def build_lodf(case: GridCase, ptdf: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """LODF matrix and islanding flags from a withdrawal-convention PTDF.

    Column k is the transfer sensitivity of a unit flow moved between the
    endpoints of line k, scaled by 1/(1 - phi_kk).  Lines with
    |1 - phi_kk| < ISLANDING_TOL are bridges: flagged, column zeroed.
    """
    # transfer = withdrawal at the to bus, injection at the from bus
    transfer = ptdf[:, case.line_to] - ptdf[:, case.line_from]
    phi_self = np.diag(transfer).copy()
    denom = 1.0 - phi_self
    islanding = np.abs(denom) < ISLANDING_TOL
    denom_safe = np.where(islanding, 1.0, denom)
    lodf = transfer / denom_safe[None, :]
    np.fill_diagonal(lodf, -1.0)
    lodf[:, islanding] = 0.0
    return lodf, islanding


def build_factors(case: GridCase) -> LinearFactors:
    ptdf = build_ptdf(case)
    lodf, islanding = build_lodf(case, ptdf)
    return LinearFactors(
        ptdf=ptdf,
        lodf=lodf,
        islanding=islanding,
        gen_incidence=gen_to_bus_matrix(case),
        load_incidence=load_to_bus_matrix(case),
    )


def screen_contingencies(case: GridCase, factors: LinearFactors) -> ContingencySet:
    """Admissible outages: generators with positive capacity and nonnegative
    lower bound; lines whose removal keeps the network connected."""
    ghat = case.ghat0
    kg = tuple(i for i in range(case.n_gen) if ghat[i] > 0 and case.glb[i] >= 0)
    ke = tuple(k for k in range(case.n_line) if not factors.islanding[k])
    return ContingencySet(gen_contingencies=kg, line_contingencies=ke)


def case_to_dict(case: GridCase) -> dict:
    return {
        "name": case.name,
        "base_mva": case.base_mva,
        "slack_bus": int(case.slack_bus),
        "penalty_Pi": case.Pi,
        "buses": [{"id": i} for i in range(case.n_bus)],
        "generators": [
            {"bus": int(case.gen_bus[i]), "glb": float(case.glb[i]), "gub": float(case.gub0[i]),
             "cost": float(case.c0[i]), "gamma": float(case.gamma[i])}
            for i in range(case.n_gen)
        ],
        "lines": [
            {"from": int(case.line_from[k]), "to": int(case.line_to[k]),
             "susceptance": float(case.susceptance[k]),
             "flb": float(case.flb[k]), "fub": float(case.fub[k])}
            for k in range(case.n_line)
        ],
        "loads": [
            {"bus": int(case.load_bus[j]), "d0": float(case.d0[j])}
            for j in range(case.n_load)
        ],
    }


def case_from_dict(data: dict, name: str = "case") -> GridCase:
    try:
        buses = data["buses"]
        gens = data["generators"]
        lines = data["lines"]
        loads = data["loads"]
        ids = [int(b["id"]) for b in buses]
        if ids != list(range(len(buses))):
            raise DataError("bus ids must be 0..n_bus-1 in order")
        return GridCase(
            n_bus=len(buses),
            gen_bus=[g["bus"] for g in gens],
            glb=[g["glb"] for g in gens],
            gub0=[g["gub"] for g in gens],
            c0=[g["cost"] for g in gens],
            gamma=[g["gamma"] for g in gens],
            line_from=[ln["from"] for ln in lines],
            line_to=[ln["to"] for ln in lines],
            susceptance=[ln["susceptance"] for ln in lines],
            flb=[ln["flb"] for ln in lines],
            fub=[ln["fub"] for ln in lines],
            load_bus=[ld["bus"] for ld in loads],
            d0=[ld["d0"] for ld in loads],
            slack_bus=int(data["slack_bus"]),
            Pi=float(data["penalty_Pi"]),
            base_mva=float(data.get("base_mva", 100.0)),
            name=data.get("name", name),
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed case file: {exc}") from exc


def load_case(path: str | Path) -> GridCase:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read case file {path}: {exc}") from exc
    return case_from_dict(data, name=path.stem)


def save_case(case: GridCase, path: str | Path) -> None:
    Path(path).write_text(json.dumps(case_to_dict(case), indent=2) + "\n")

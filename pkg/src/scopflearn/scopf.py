"""Pure evaluators for the secure dispatch problem: droop response, flows,
thermal-limit slacks, total objective, and contingency balance residuals.

All functions are side-effect free and operate on plain arrays; batched
variants accept a leading axis where noted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import ContingencySet, GridCase, LinearFactors
from .sampling import Instance


@dataclass(frozen=True)
class PrimalEstimate:
    """Full primal point for one instance.

    g: base dispatch (n_gen,); gk: per-contingency dispatches (|Kg|, n_gen);
    nk: global response signals in [0, 1]; rhok: cap indicators (|Kg|, n_gen);
    eta0 / eta_g / eta_e: thermal slack vectors for the base case, generator
    contingencies and line contingencies.
    """

    g: np.ndarray
    gk: np.ndarray
    nk: np.ndarray
    rhok: np.ndarray
    eta0: np.ndarray
    eta_g: np.ndarray
    eta_e: np.ndarray


def apr_response(
    g: np.ndarray,
    n: float,
    k: int,
    gamma: np.ndarray,
    ghat: np.ndarray,
    gub: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Proportional droop response to the outage of generator k.

    gk_i = min(g_i + n*gamma_i*ghat_i, gub_i) for survivors, gk_k = 0.
    The cap indicator is 1 only where the uncapped response strictly exceeds
    the upper bound.
    """
    raw = np.asarray(g, float) + n * gamma * ghat
    gk = np.minimum(raw, gub)
    rho = (raw > gub).astype(float)
    gk[k] = 0.0
    rho[k] = 0.0
    return gk, rho


def base_flows(g: np.ndarray, d_bus: np.ndarray, factors: LinearFactors) -> np.ndarray:
    """DC line flows f = PTDF @ (d_bus - B @ g); batched over a leading axis."""
    g = np.asarray(g, float)
    withdrawal = np.asarray(d_bus, float) - g @ factors.gen_incidence.T
    return withdrawal @ factors.ptdf.T


def slack_base(f: np.ndarray, case: GridCase) -> np.ndarray:
    """Per-line violation of the thermal box: max(0, f - fub, flb - f)."""
    return np.maximum(0.0, np.maximum(f - case.fub, case.flb - f))


def slack_gen_contingency(
    gk: np.ndarray, d_bus: np.ndarray, case: GridCase, factors: LinearFactors
) -> np.ndarray:
    """Thermal slack under a generator outage, from the contingency dispatch."""
    return slack_base(base_flows(gk, d_bus, factors), case)


def slack_line_contingency(
    f: np.ndarray, k: int, case: GridCase, factors: LinearFactors
) -> np.ndarray:
    """Thermal slack after the outage of line k, via LODF redistribution.

    The outaged line itself carries no flow, so its entry is zero by
    definition.
    """
    post = f + f[..., k, None] * factors.lodf[:, k]
    eta = slack_base(post, case)
    eta[..., k] = 0.0
    return eta


def scopf_objective(inst: Instance, est: PrimalEstimate, case: GridCase) -> float:
    """Linear dispatch cost plus the penalized L1 norm of every slack family."""
    slack_total = est.eta0.sum() + est.eta_g.sum() + est.eta_e.sum()
    return float(inst.c @ est.g + case.Pi * slack_total)


def balance_residuals(est: PrimalEstimate, inst: Instance) -> np.ndarray:
    """Signed per-contingency power balance residual: 1'gk - 1'd."""
    return est.gk.sum(axis=-1) - inst.d.sum()


def evaluate_estimate(
    inst: Instance,
    g: np.ndarray,
    gk: np.ndarray,
    nk: np.ndarray,
    rhok: np.ndarray,
    case: GridCase,
    factors: LinearFactors,
    cont: ContingencySet,
) -> PrimalEstimate:
    """Complete a (g, gk) pair into a PrimalEstimate by retrieving slacks."""
    d_bus = np.asarray(inst.d, float) @ factors.load_incidence.T
    f0 = base_flows(g, d_bus, factors)
    eta0 = slack_base(f0, case)
    eta_g = np.stack([
        slack_gen_contingency(gk[j], d_bus, case, factors)
        for j in range(len(cont.gen_contingencies))
    ]) if cont.n_gen else np.zeros((0, case.n_line))
    eta_e = np.stack([
        slack_line_contingency(f0, k, case, factors)
        for k in cont.line_contingencies
    ]) if cont.n_line else np.zeros((0, case.n_line))
    return PrimalEstimate(g=g, gk=gk, nk=nk, rhok=rhok, eta0=eta0, eta_g=eta_g, eta_e=eta_e)

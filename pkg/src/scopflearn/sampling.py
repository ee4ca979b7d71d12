"""Instance generation: correlated perturbation of loads, costs and dispatch
upper bounds, plus assembly of the normalized network input vector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .grid import ContingencySet, GridCase

Z95 = 1.645  # two-sided 90% z-score; the truncation box sits at the 95th percentile
MAX_REJECTIONS = 100
MAX_RESAMPLES = 10_000


@dataclass(frozen=True)
class PerturbationConfig:
    mu: float = 0.5
    load_corr: float = 0.5
    factor_corr: float = 0.8
    seed: int = 0
    z95: float = Z95

    def __post_init__(self):
        if not 0 <= self.mu < 1:
            raise DataError(f"mu must be in [0, 1), got {self.mu}")
        for name in ("load_corr", "factor_corr"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise DataError(f"{name} must be in [0, 1], got {v}")
        if not self.z95 > 0:
            raise DataError("z95 must be positive")


@dataclass(frozen=True)
class Instance:
    """One sampled problem: demands d, costs c, upper bounds gub, and the
    flattened input vector x of length 2*n_gen + n_load."""

    d: np.ndarray
    c: np.ndarray
    gub: np.ndarray
    x: np.ndarray
    seed: int = 0

    @property
    def d_total(self) -> float:
        return float(self.d.sum())


def _correlation_factor(n: int, corr: float) -> np.ndarray:
    """Symmetric square root of the equicorrelation matrix corr + (1-corr)I.

    Computed via eigendecomposition so the degenerate corr = 1 case (rank one,
    all deviations identical) works as well.
    """
    C = np.full((n, n), corr) + (1.0 - corr) * np.eye(n)
    vals, vecs = np.linalg.eigh(C)
    if vals.min() < -1e-10:
        raise DataError("correlation matrix is not positive semidefinite")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def sample_loads(case: GridCase, config: PerturbationConfig, rng: np.random.Generator) -> np.ndarray:
    """Truncated correlated Gaussian draw around d0.

    sigma_i = mu*d0_i/z95 so the truncation box (1 +/- mu)*d0 sits at the
    95th percentile of each marginal.  Whole-vector rejection inside the box;
    element-wise clamping after MAX_REJECTIONS rejections.
    """
    d0 = case.d0
    sigma = config.mu * d0 / config.z95
    lo, hi = (1.0 - config.mu) * d0, (1.0 + config.mu) * d0
    root = _correlation_factor(case.n_load, config.load_corr)
    for _ in range(MAX_REJECTIONS):
        d = d0 + sigma * (root @ rng.standard_normal(case.n_load))
        if np.all(d >= lo) and np.all(d <= hi):
            return d
    return np.clip(d, lo, hi)


def sample_factors(n: int, corr: float, config: PerturbationConfig, rng: np.random.Generator) -> np.ndarray:
    """One draw from N(1, Sigma) with equicorrelated entries; sigma = mu/z95.

    No truncation here; the cost and bound safeguards are applied downstream.
    """
    sigma = config.mu / config.z95
    root = _correlation_factor(n, corr)
    return 1.0 + sigma * (root @ rng.standard_normal(n))


def _normalize(values: np.ndarray, base: np.ndarray) -> np.ndarray:
    denom = np.where(base == 0.0, 1.0, base)
    return values / denom


def balanced_box_vertices(glb: np.ndarray, gub: np.ndarray, total: float) -> np.ndarray:
    """Vertices of the balanced-dispatch polytope {1'g = total} within the
    box: all but one coordinate pinned to a bound, the free one balancing."""
    import itertools

    n = glb.size
    points = []
    for free in range(n):
        others = [i for i in range(n) if i != free]
        for pattern in itertools.product((0, 1), repeat=n - 1):
            g = np.empty(n)
            for i, bit in zip(others, pattern):
                g[i] = gub[i] if bit else glb[i]
            g[free] = total - g[others].sum()
            if glb[free] - 1e-12 <= g[free] <= gub[free] + 1e-12:
                g[free] = np.clip(g[free], glb[free], gub[free])
                points.append(g)
    return np.array(points) if points else np.zeros((0, n))


def _solvable(case: GridCase, cont: ContingencySet | None, d_total: float, gub: np.ndarray) -> bool:
    """Instance-level solvability screen.

    Base case: total load inside [sum glb, sum gub].  Contingencies: some
    candidate dispatch (a vertex of the balanced polytope or the proportional
    point) must be recoverable under every admissible generator outage, which
    certifies that the hard contingency balance constraints admit at least
    one dispatch.  Outage coverage is concave in the dispatch, so the
    vertices are where per-outage coverage peaks.
    """
    glb = case.glb
    if not (glb.sum() <= d_total <= gub.sum()):
        return False
    if cont is None or cont.n_gen == 0:
        return True
    ghat = gub - glb
    share = ghat / ghat.sum() if ghat.sum() > 0 else np.full_like(ghat, 1.0 / len(ghat))
    g_ref = glb + (d_total - glb.sum()) * share
    candidates = np.concatenate(
        [balanced_box_vertices(glb, gub, d_total), g_ref[None, :]], axis=0)
    droop = case.gamma * ghat
    ok = np.ones(candidates.shape[0], bool)
    for k in cont.gen_contingencies:
        mask = np.arange(case.n_gen) != k
        reachable = np.minimum(candidates + droop, gub)[:, mask].sum(-1)
        ok &= reachable >= d_total
    return bool(ok.any())


def make_instance(
    case: GridCase,
    config: PerturbationConfig,
    rng: np.random.Generator,
    cont: ContingencySet | None = None,
    seed: int = 0,
) -> tuple[Instance, int]:
    """Sample one instance; returns (instance, resample_count).

    Draws are redone wholesale until the instance passes the solvability
    screen, so every emitted instance admits a balanced base dispatch and a
    balanced response to every admissible generator outage.
    """
    ghat0 = case.ghat0
    floor = case.glb + 0.01 * ghat0
    for attempt in range(MAX_RESAMPLES):
        d = sample_loads(case, config, rng)
        fc = sample_factors(case.n_gen, config.factor_corr, config, rng)
        fg = sample_factors(case.n_gen, config.factor_corr, config, rng)
        c = np.maximum(0.0, fc * case.c0)
        gub = np.maximum(fg * case.gub0, floor)
        if _solvable(case, cont, float(d.sum()), gub):
            x = np.concatenate([
                _normalize(d, case.d0),
                _normalize(c, case.c0),
                _normalize(gub, case.gub0),
            ])
            return Instance(d=d, c=c, gub=gub, x=x, seed=seed), attempt
    raise DataError("could not sample a solvable instance; case capacity is too tight")


def sample_dataset(
    case: GridCase,
    config: PerturbationConfig,
    n: int,
    cont: ContingencySet | None = None,
) -> tuple[list[Instance], int]:
    """Sample n instances deterministically from config.seed.

    Each record gets an independent stream keyed by (seed, index), so the
    dataset is reproducible and order-independent.
    """
    instances = []
    resamples = 0
    for i in range(n):
        rng = np.random.default_rng([config.seed, i])
        inst, extra = make_instance(case, config, rng, cont=cont, seed=i)
        instances.append(inst)
        resamples += extra
    return instances, resamples

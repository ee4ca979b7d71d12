"""Differentiable dispatch pipeline.

Three stages map raw network outputs to a full primal point:

1. bound map     -- sigmoid squashing into the dispatch box,
2. repair layer  -- proportional rescaling restoring total power balance,
3. bisection layer -- per-outage search on the global response signal,
   followed by slack retrieval for every thermal constraint family.

Each stage has an exact forward rule and a vector-Jacobian product.  The
backward conventions are: the repair branch and the per-generator cap flags
are frozen from the forward pass, and the converged response signal is
treated as a constant (no gradient through the bisection root).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .grid import ContingencySet, GridCase, LinearFactors

DEGENERATE_TOL = 1e-12


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# bound map

def bound_map(z: np.ndarray, glb: np.ndarray, gub: np.ndarray):
    """Squash raw outputs into [glb, gub]: g = glb + sigmoid(z) * (gub - glb)."""
    sig = sigmoid(z)
    gcheck = glb + sig * (gub - glb)
    return gcheck, sig


def bound_map_vjp(grad_gcheck: np.ndarray, sig: np.ndarray, glb: np.ndarray,
                  gub: np.ndarray) -> np.ndarray:
    return grad_gcheck * (gub - glb) * sig * (1.0 - sig)


# ---------------------------------------------------------------------------
# power balance repair

@dataclass
class RepairContext:
    gcheck: np.ndarray
    glb: np.ndarray
    gub: np.ndarray
    d_total: np.ndarray
    s: np.ndarray
    zeta: np.ndarray
    deficit: np.ndarray
    degenerate: np.ndarray


def repair_layer(gcheck: np.ndarray, d_total, glb: np.ndarray, gub: np.ndarray):
    """Proportional rescaling so the dispatch sums to the total load.

    Deficit branch blends toward the upper bounds with
    zeta = (1'd - 1'g) / (1'gub - 1'g); the surplus branch blends toward the
    lower bounds analogously.  Requires 1'glb <= 1'd <= 1'gub.  A vanishing
    blend denominator can only occur when the dispatch already sits on the
    forcing bound, in which case that bound is returned directly.

    Works on (..., n_gen) arrays; d_total broadcasts over leading axes.
    """
    gcheck = np.asarray(gcheck, float)
    glb = np.asarray(glb, float)
    gub = np.asarray(gub, float)
    d_total = np.asarray(d_total, float)
    s = gcheck.sum(-1)
    total_ub = gub.sum(-1) * np.ones_like(s)
    total_lb = glb.sum(-1) * np.ones_like(s)
    deficit = s < d_total
    denom = np.where(deficit, total_ub - s, s - total_lb)
    degenerate = denom <= DEGENERATE_TOL
    denom_safe = np.where(degenerate, 1.0, denom)
    zeta = np.where(deficit, d_total - s, s - d_total) / denom_safe
    zeta = np.where(degenerate, 1.0, zeta)
    target = np.where(deficit[..., None], gub, glb)
    gtilde = (1.0 - zeta)[..., None] * gcheck + zeta[..., None] * target
    ctx = RepairContext(gcheck=gcheck, glb=glb, gub=gub, d_total=d_total,
                        s=s, zeta=zeta, deficit=deficit, degenerate=degenerate)
    return gtilde, ctx


def repair_layer_vjp(grad_gtilde: np.ndarray, ctx: RepairContext) -> np.ndarray:
    """Exact Jacobian of the branch taken in the forward pass.

    The Jacobian is (1 - zeta) I + u 1', where u carries the dependence of
    zeta on the dispatch sum:
      deficit:  u = (gub - g) (d - 1'gub) / (1'gub - 1'g)^2
      surplus:  u = -(g - glb) (d - 1'glb) / (1'g - 1'glb)^2
    """
    s = ctx.s
    total_ub = ctx.gub.sum(-1) * np.ones_like(s)
    total_lb = ctx.glb.sum(-1) * np.ones_like(s)
    denom = np.where(ctx.deficit, total_ub - s, s - total_lb)
    denom = np.where(ctx.degenerate, 1.0, denom)
    coef_up = (ctx.d_total - total_ub) / denom**2
    coef_dn = (ctx.d_total - total_lb) / denom**2
    u = np.where(
        ctx.deficit[..., None],
        (ctx.gub - ctx.gcheck) * coef_up[..., None],
        -(ctx.gcheck - ctx.glb) * coef_dn[..., None],
    )
    u = np.where(ctx.degenerate[..., None], 0.0, u)
    scale = np.where(ctx.degenerate, 0.0, 1.0 - ctx.zeta)
    rank_one = (grad_gtilde * u).sum(-1, keepdims=True)
    return scale[..., None] * grad_gtilde + rank_one


# ---------------------------------------------------------------------------
# bisection on the global response signal

def binary_search_layer(g, d_total: float, k: int, gamma, ghat, gub, t: int = 25):
    """Bisect the response signal n in [0, 1] so the post-outage dispatch
    balances the load, then emit the dispatch, signal and cap flags evaluated
    at the returned signal.

    Returns the evaluated signal with the smallest absolute residual (the
    final bracketing midpoint is evaluated as a candidate as well, so the
    residual never grows when t does).  When no balancing signal exists the
    search converges to the 0 or 1 boundary and the signed residual is left
    to the caller.
    """
    if t < 1:
        raise ConfigError(f"bisection iteration count must be >= 1, got {t}")
    g = np.asarray(g, float)
    droop = np.asarray(gamma, float) * np.asarray(ghat, float)
    gub = np.asarray(gub, float)
    survivors = np.ones(g.size, bool)
    survivors[k] = False

    def residual(n):
        return np.minimum(g + n * droop, gub)[survivors].sum() - d_total

    n_min, n_max = 0.0, 1.0
    n = 0.5
    best_n, best_abs = n, np.inf
    for _ in range(t):
        e = residual(n)
        if abs(e) <= best_abs:
            best_n, best_abs = n, abs(e)
        if e > 0.0:
            n_max = n
        else:
            n_min = n
        n = 0.5 * (n_max + n_min)
    if abs(residual(n)) <= best_abs:
        best_n = n
    raw = g + best_n * droop
    gk = np.minimum(raw, gub)
    rho = (raw > gub).astype(float)
    gk[k] = 0.0
    rho[k] = 0.0
    return gk, best_n, rho


def binary_search_batch(g, d_total, kg, gamma, ghat, gub, t: int = 25):
    """Vectorized bisection over a batch of dispatches and all generator
    contingencies at once.

    g: (B, G); d_total: (B,); ghat, gub: (B, G); kg: contingency indices (K,).
    Returns gk (B, K, G), nk (B, K), rho (B, K, G).
    """
    if t < 1:
        raise ConfigError(f"bisection iteration count must be >= 1, got {t}")
    g = np.atleast_2d(np.asarray(g, float))
    gub = np.atleast_2d(np.asarray(gub, float))
    ghat = np.atleast_2d(np.asarray(ghat, float))
    d_total = np.atleast_1d(np.asarray(d_total, float))
    kg = np.asarray(kg, int)
    n_batch, n_gen = g.shape
    n_cont = kg.size
    survivors = np.ones((n_cont, n_gen))
    survivors[np.arange(n_cont), kg] = 0.0

    droop = (np.asarray(gamma, float) * ghat)[:, None, :]
    g_b = g[:, None, :]
    gub_b = gub[:, None, :]
    n = np.full((n_batch, n_cont), 0.5)
    n_min = np.zeros((n_batch, n_cont))
    n_max = np.ones((n_batch, n_cont))
    best_n = n.copy()
    best_abs = np.full((n_batch, n_cont), np.inf)
    for _ in range(t):
        gk = np.minimum(g_b + n[..., None] * droop, gub_b) * survivors
        e = gk.sum(-1) - d_total[:, None]
        better = np.abs(e) <= best_abs
        best_n = np.where(better, n, best_n)
        best_abs = np.where(better, np.abs(e), best_abs)
        pos = e > 0.0
        n_max = np.where(pos, n, n_max)
        n_min = np.where(~pos, n, n_min)
        n = 0.5 * (n_max + n_min)
    gk = np.minimum(g_b + n[..., None] * droop, gub_b) * survivors
    e = gk.sum(-1) - d_total[:, None]
    best_n = np.where(np.abs(e) <= best_abs, n, best_n)
    raw = g_b + best_n[..., None] * droop
    gk = np.minimum(raw, gub_b) * survivors
    rho = ((raw > gub_b) & (survivors > 0)).astype(float)
    return gk, best_n, rho


def binary_search_vjp(grad_gk: np.ndarray, rho: np.ndarray, kg: np.ndarray) -> np.ndarray:
    """Gradient of the contingency dispatches back onto the base dispatch.

    With the signal treated as a constant, dgk_i/dg_j = delta_ij for
    uncapped survivors and 0 otherwise, so the VJP is a masked sum over
    contingencies.
    """
    kg = np.asarray(kg, int)
    mask = 1.0 - rho
    mask[..., np.arange(kg.size), kg] = 0.0
    return (grad_gk * mask).sum(-2)


# ---------------------------------------------------------------------------
# full batched pipeline

@dataclass
class PipelineState:
    """Everything the forward pass saved for reporting and backward."""

    z: np.ndarray
    sig: np.ndarray
    glb: np.ndarray
    gub: np.ndarray
    repair_ctx: RepairContext
    gtilde: np.ndarray
    gk: np.ndarray
    nk: np.ndarray
    rho: np.ndarray
    h: np.ndarray
    d_total: np.ndarray
    f0: np.ndarray = None
    eta0: np.ndarray = None
    eta_g: np.ndarray = None
    eta_e: np.ndarray = None
    sign0: np.ndarray = None
    sign_g: np.ndarray = None
    sign_e: np.ndarray = None


class PrimalPipeline:
    """Batched bound map -> repair -> bisection -> slack retrieval for one
    grid, with the matching backward pass to raw network outputs."""

    def __init__(self, case: GridCase, factors: LinearFactors,
                 cont: ContingencySet, t: int = 25):
        self.case = case
        self.cont = cont
        self.t = t
        self.kg = np.asarray(cont.gen_contingencies, int)
        self.ke = np.asarray(cont.line_contingencies, int)
        self.glb = case.glb
        self.gamma = case.gamma
        self.flb = case.flb
        self.fub = case.fub
        self.Pi = case.Pi
        # flow maps: f = d @ phi_load' - g @ phi_gen'
        self.phi_gen = factors.ptdf @ factors.gen_incidence
        self.phi_load = factors.ptdf @ factors.load_incidence
        self.lodf_ke = factors.lodf[:, self.ke].T if self.ke.size else np.zeros((0, case.n_line))

    def forward(self, z: np.ndarray, d: np.ndarray, gub: np.ndarray,
                with_slacks: bool = True) -> PipelineState:
        z = np.atleast_2d(np.asarray(z, float))
        d = np.atleast_2d(np.asarray(d, float))
        gub = np.atleast_2d(np.asarray(gub, float))
        glb = np.broadcast_to(self.glb, gub.shape)
        d_total = d.sum(-1)
        gcheck, sig = bound_map(z, glb, gub)
        gtilde, repair_ctx = repair_layer(gcheck, d_total, glb, gub)
        gk, nk, rho = binary_search_batch(
            gtilde, d_total, self.kg, self.gamma, gub - glb, gub, self.t)
        h = gk.sum(-1) - d_total[:, None]
        state = PipelineState(z=z, sig=sig, glb=glb, gub=gub, repair_ctx=repair_ctx,
                              gtilde=gtilde, gk=gk, nk=nk, rho=rho, h=h,
                              d_total=d_total)
        if with_slacks:
            self._attach_slacks(state, d)
        return state

    def evaluate_dispatch(self, g: np.ndarray, d: np.ndarray, gub: np.ndarray,
                          t: int | None = None) -> PipelineState:
        """Forward pass starting from a given dispatch instead of raw network
        outputs (no bound map or repair); used by reference evaluations."""
        g = np.atleast_2d(np.asarray(g, float))
        d = np.atleast_2d(np.asarray(d, float))
        gub = np.atleast_2d(np.asarray(gub, float))
        glb = np.broadcast_to(self.glb, gub.shape)
        d_total = d.sum(-1)
        gk, nk, rho = binary_search_batch(
            g, d_total, self.kg, self.gamma, gub - glb, gub, t or self.t)
        h = gk.sum(-1) - d_total[:, None]
        state = PipelineState(z=None, sig=None, glb=glb, gub=gub, repair_ctx=None,
                              gtilde=g, gk=gk, nk=nk, rho=rho, h=h, d_total=d_total)
        self._attach_slacks(state, d)
        return state

    def _attach_slacks(self, state: PipelineState, d: np.ndarray) -> None:
        flow_d = d @ self.phi_load.T
        f0 = flow_d - state.gtilde @ self.phi_gen.T
        state.f0 = f0
        state.eta0, state.sign0 = self._slack_and_sign(f0)
        fg = flow_d[:, None, :] - state.gk @ self.phi_gen.T
        state.eta_g, state.sign_g = self._slack_and_sign(fg)
        if self.ke.size:
            post = f0[:, None, :] + f0[:, self.ke, None] * self.lodf_ke[None, :, :]
            eta_e, sign_e = self._slack_and_sign(post)
            rows = np.arange(self.ke.size)
            eta_e[:, rows, self.ke] = 0.0
            sign_e[:, rows, self.ke] = 0.0
        else:
            batch = f0.shape[0]
            eta_e = np.zeros((batch, 0, self.case.n_line))
            sign_e = np.zeros_like(eta_e)
        state.eta_e = eta_e
        state.sign_e = sign_e

    def _slack_and_sign(self, f: np.ndarray):
        over = f - self.fub
        under = self.flb - f
        eta = np.maximum(0.0, np.maximum(over, under))
        sign = np.where(over > 0, 1.0, 0.0) + np.where(under > 0, -1.0, 0.0)
        return eta, sign

    def slack_total(self, state: PipelineState) -> np.ndarray:
        return (state.eta0.sum(-1) + state.eta_g.sum((-2, -1))
                + state.eta_e.sum((-2, -1)))

    def objective(self, state: PipelineState, c: np.ndarray) -> np.ndarray:
        """Per-instance cost plus penalized slacks (requires slacks attached)."""
        return (np.atleast_2d(c) * state.gtilde).sum(-1) + self.Pi * self.slack_total(state)

    def objective_grads(self, state: PipelineState, c: np.ndarray):
        """Gradient of the per-instance objective w.r.t. the repaired dispatch
        and the contingency dispatches, with cap flags and signals frozen.

        Line-contingency slacks depend on the base flows both directly and
        through the redistributed flow of the outaged line, so their sign
        patterns accumulate an extra term on the outaged-line column.
        """
        w = state.sign0.copy()
        if self.ke.size:
            w += state.sign_e.sum(-2)
            extra = (state.sign_e * self.lodf_ke[None, :, :]).sum(-1)
            w[:, self.ke] += extra
        grad_gtilde = np.atleast_2d(c) - self.Pi * (w @ self.phi_gen)
        grad_gk = -self.Pi * (state.sign_g @ self.phi_gen)
        return grad_gtilde, grad_gk

    def backward(self, state: PipelineState, grad_gtilde: np.ndarray,
                 grad_gk: np.ndarray | None = None) -> np.ndarray:
        """Chain gradients on (gtilde, gk) back to the raw network outputs."""
        total = np.asarray(grad_gtilde, float)
        if grad_gk is not None and self.kg.size:
            total = total + binary_search_vjp(grad_gk, state.rho, self.kg)
        grad_gcheck = repair_layer_vjp(total, state.repair_ctx)
        return bound_map_vjp(grad_gcheck, state.sig, state.glb, state.gub)

    def frozen_forward_objective(self, z: np.ndarray, state: PipelineState,
                                 d: np.ndarray, c: np.ndarray):
        """Objective and residuals re-evaluated at new raw outputs z with every
        branch decision frozen at the tape point: same repair branch, same cap
        flags, same response signals, same slack sign patterns.

        This is the exactly-differentiable surrogate whose analytic gradient
        the backward pass computes; finite differences of it validate the VJPs.
        """
        z = np.atleast_2d(np.asarray(z, float))
        d = np.atleast_2d(np.asarray(d, float))
        gcheck, _ = bound_map(z, state.glb, state.gub)
        ctx = state.repair_ctx
        s = gcheck.sum(-1)
        total_ub = state.gub.sum(-1)
        total_lb = state.glb.sum(-1)
        denom = np.where(ctx.deficit, total_ub - s, s - total_lb)
        denom = np.where(ctx.degenerate, 1.0, denom)
        zeta = np.where(ctx.deficit, state.d_total - s, s - state.d_total) / denom
        zeta = np.where(ctx.degenerate, 1.0, zeta)
        target = np.where(ctx.deficit[..., None], state.gub, state.glb)
        gtilde = (1.0 - zeta)[..., None] * gcheck + zeta[..., None] * target
        # frozen-mask contingency dispatch: linear in gtilde
        droop = (self.gamma * (state.gub - state.glb))[:, None, :]
        survivors = np.ones((self.kg.size, self.case.n_gen))
        survivors[np.arange(self.kg.size), self.kg] = 0.0
        raw = gtilde[:, None, :] + state.nk[..., None] * droop
        gk = (raw * (1.0 - state.rho) + state.gub[:, None, :] * state.rho) * survivors
        h = gk.sum(-1) - state.d_total[:, None]
        flow_d = d @ self.phi_load.T
        f0 = flow_d - gtilde @ self.phi_gen.T
        fg = flow_d[:, None, :] - gk @ self.phi_gen.T
        # frozen-sign slack: eta = sign * (f - active bound)
        bound0 = np.where(state.sign0 > 0, self.fub, self.flb)
        slack = (state.sign0 * (f0 - bound0)).sum(-1)
        bound_g = np.where(state.sign_g > 0, self.fub, self.flb)
        slack += (state.sign_g * (fg - bound_g)).sum((-2, -1))
        if self.ke.size:
            post = f0[:, None, :] + f0[:, self.ke, None] * self.lodf_ke[None, :, :]
            bound_e = np.where(state.sign_e > 0, self.fub, self.flb)
            slack += (state.sign_e * (post - bound_e)).sum((-2, -1))
        obj = (np.atleast_2d(c) * gtilde).sum(-1) + self.Pi * slack
        return obj, h, gtilde

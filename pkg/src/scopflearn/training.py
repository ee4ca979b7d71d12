"""Training loops: the alternating primal-dual scheme plus the penalty-only
and supervised (naive / distance-plus-penalty) baselines.

All four trainers share the primal architecture: layer-normalized MLP, bound
map, power-balance repair, and per-outage bisection.  Only the primal-dual
scheme adds a second network that learns the multiplier estimates for the
contingency balance constraints.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DivergenceError
from .grid import ContingencySet, GridCase, LinearFactors
from .layers import PrimalPipeline
from .nn import (
    AdamState,
    MlpParams,
    adam_step,
    hidden_width,
    init_mlp,
    lr_schedule,
    mlp_backward,
    mlp_forward,
)
from .sampling import Instance

METHODS = ("pdl", "penalty", "naive", "ld")
LD_PENALTY = 1e3
EVAL_CHUNK = 256


@dataclass(frozen=True)
class TrainerConfig:
    K: int = 20
    L: int = 2000
    batch: int = 8
    rho0: float = 0.1
    rho_max: float = 1e8
    tau: float = 0.9
    alpha: float = 2.0
    dual_loss_rho: float = 0.1
    obj_scale: float = 1e5
    lr: float = 1e-4
    seed: int = 0
    bisect_iters: int = 25

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ConfigError(f"tau must be in (0, 1), got {self.tau}")
        if not self.alpha > 1:
            raise ConfigError(f"alpha must exceed 1, got {self.alpha}")
        for name in ("K", "L", "batch", "rho0", "rho_max", "dual_loss_rho",
                     "obj_scale", "lr", "bisect_iters"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def total_steps(self) -> int:
        return 2 * self.K * self.L


@dataclass
class TrainerState:
    rho: float
    v_prev: float = float("inf")
    outer: int = 0
    inner: int = 0

    def as_dict(self) -> dict:
        return {"rho": self.rho, "v_prev": self.v_prev,
                "outer": self.outer, "inner": self.inner}


@dataclass
class TrainResult:
    method: str
    primal: MlpParams
    primal_adam: AdamState
    dual: MlpParams | None
    dual_adam: AdamState | None
    state: TrainerState
    log: list = field(default_factory=list)
    outer_log: list = field(default_factory=list)
    wall_s: float = 0.0


# ---------------------------------------------------------------------------
# loss pieces

def primal_loss_terms(pipe: PrimalPipeline, state, c, lam, rho, obj_scale):
    """Per-instance loss values and the gradients the backward pass needs.

    loss = objective/obj_scale + lam'h + (rho/2) sum h^2, with squared
    violations as the penalty function.
    """
    obj = pipe.objective(state, c)
    h = state.h
    loss = obj / obj_scale + (lam * h).sum(-1) + 0.5 * rho * (h * h).sum(-1)
    grad_gtilde, grad_gk = pipe.objective_grads(state, c)
    grad_gtilde = grad_gtilde / obj_scale
    grad_gk = grad_gk / obj_scale + (lam + rho * h)[..., None]
    return loss, grad_gtilde, grad_gk


def dual_loss(lambda_new, lambda_frozen, h, dual_loss_rho: float) -> float:
    """Distance between new multipliers and the frozen-multiplier update
    target lambda_frozen + rho_d * h (Euclidean norm)."""
    lambda_new = np.asarray(lambda_new, float)
    target = np.asarray(lambda_frozen, float) + dual_loss_rho * np.asarray(h, float)
    return float(np.linalg.norm(lambda_new - target))


def update_penalty(rho: float, v: float, v_prev: float, config: TrainerConfig) -> float:
    """Grow the penalty only when the max violation failed to drop below
    tau times its previous value; never exceed rho_max."""
    if v > config.tau * v_prev:
        return min(config.alpha * rho, config.rho_max)
    return rho


def max_violation(pipe: PrimalPipeline, primal: MlpParams, data: "_Stacked") -> float:
    """Worst contingency balance residual of the current primal network over
    the dataset (infinity norm)."""
    worst = 0.0
    for lo in range(0, data.n, EVAL_CHUNK):
        sl = slice(lo, lo + EVAL_CHUNK)
        z, _ = mlp_forward(primal, data.x[sl])
        st = pipe.forward(z, data.d[sl], data.gub[sl], with_slacks=False)
        if st.h.size:
            worst = max(worst, float(np.abs(st.h).max()))
    return worst


# ---------------------------------------------------------------------------
# shared plumbing

@dataclass
class _Stacked:
    x: np.ndarray
    d: np.ndarray
    c: np.ndarray
    gub: np.ndarray
    g_star: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.x.shape[0]


def stack_instances(instances: list[Instance], g_star=None) -> _Stacked:
    if not instances:
        raise DataError("dataset is empty")
    return _Stacked(
        x=np.stack([i.x for i in instances]),
        d=np.stack([i.d for i in instances]),
        c=np.stack([i.c for i in instances]),
        gub=np.stack([i.gub for i in instances]),
        g_star=None if g_star is None else np.asarray(g_star, float),
    )


def build_networks(case: GridCase, cont: ContingencySet, dim_x: int, seed: int,
                   need_dual: bool):
    width = hidden_width(dim_x)
    primal_sizes = (dim_x, width, width, width, width, case.n_gen)
    primal = init_mlp(primal_sizes, np.random.default_rng([seed, 0]),
                      use_layernorm=True)
    dual = None
    if need_dual:
        dual_sizes = (dim_x, width, width, width, width, max(cont.n_gen, 1))
        dual = init_mlp(dual_sizes, np.random.default_rng([seed, 2]),
                        use_layernorm=False)
    return primal, dual


class _Run:
    """Bookkeeping shared by the four trainers: minibatch stream, global step
    counter with the shared learning-rate clock, CSV-ready log rows."""

    def __init__(self, config: TrainerConfig, n_records: int):
        self.config = config
        self.rng = np.random.default_rng([config.seed, 1])
        self.n = n_records
        self.step = 0
        self.log: list = []
        self.t0 = time.perf_counter()

    def next_batch(self) -> np.ndarray:
        return self.rng.integers(0, self.n, size=self.config.batch)

    def lr(self) -> float:
        return lr_schedule(self.config.lr, self.step, self.config.total_steps)

    def record(self, outer: int, inner: int, loss: float, rho: float, v: float) -> None:
        if not np.isfinite(loss):
            raise DivergenceError(
                f"non-finite loss at outer {outer} inner {inner}")
        self.log.append({
            "outer_k": outer,
            "inner_l": inner,
            "loss": float(loss),
            "rho": float(rho),
            "v_k": float(v),
            "lr": self.lr(),
            "wall_ms": (time.perf_counter() - self.t0) * 1e3,
        })
        self.step += 1


def _mean_objective(pipe: PrimalPipeline, primal: MlpParams, data: _Stacked) -> float:
    total = 0.0
    for lo in range(0, data.n, EVAL_CHUNK):
        sl = slice(lo, lo + EVAL_CHUNK)
        z, _ = mlp_forward(primal, data.x[sl])
        st = pipe.forward(z, data.d[sl], data.gub[sl])
        total += float(pipe.objective(st, data.c[sl]).sum())
    return total / data.n


def _forward_batch(pipe, primal, data, idx, with_slacks=True):
    z, tape = mlp_forward(primal, data.x[idx])
    state = pipe.forward(z, data.d[idx], data.gub[idx], with_slacks=with_slacks)
    return z, tape, state


def _apply_step(pipe, primal, tape, state, grad_gtilde, grad_gk, adam, lr, batch):
    grad_z = pipe.backward(state, grad_gtilde, grad_gk) / batch
    grads, _ = mlp_backward(primal, tape, grad_z)
    adam_step(primal, grads, adam, lr)


# ---------------------------------------------------------------------------
# trainers

def train_pdl(case: GridCase, factors: LinearFactors, cont: ContingencySet,
              instances: list[Instance], config: TrainerConfig,
              checkpoint_cb=None) -> TrainResult:
    """Alternating primal-dual training.

    Each outer iteration runs L primal steps against multipliers from the
    frozen dual network, measures the worst balance violation, snapshots the
    dual network, runs L dual regression steps toward the multiplier update
    targets, and finally updates the penalty coefficient.
    """
    t_start = time.perf_counter()
    data = stack_instances(instances)
    pipe = PrimalPipeline(case, factors, cont, t=config.bisect_iters)
    dim_x = data.x.shape[1]
    primal, dual = build_networks(case, cont, dim_x, config.seed, need_dual=True)
    primal_adam = AdamState.for_params(primal)
    dual_adam = AdamState.for_params(dual)
    state = TrainerState(rho=config.rho0)
    run = _Run(config, data.n)
    outer_log = []
    v_k = float("nan")

    for k in range(1, config.K + 1):
        # primal phase: dual outputs are constants for the whole phase
        lam_all = _dual_outputs(dual, data, cont)
        for l in range(1, config.L + 1):
            idx = run.next_batch()
            z, tape, st = _forward_batch(pipe, primal, data, idx)
            loss_vec, g_t, g_k = primal_loss_terms(
                pipe, st, data.c[idx], lam_all[idx], state.rho, config.obj_scale)
            loss = float(loss_vec.mean())
            lr = run.lr()
            run.record(k, l, loss, state.rho, v_k)
            _apply_step(pipe, primal, tape, st, g_t, g_k, primal_adam, lr,
                        config.batch)

        v_k = max_violation(pipe, primal, data)

        # dual phase: regression toward frozen-multiplier update targets
        frozen = dual.copy()
        targets = np.zeros((data.n, dual.sizes[-1]))
        targets[:, :cont.n_gen] = _dual_outputs(frozen, data, cont) \
            + config.dual_loss_rho * _residuals_all(pipe, primal, data)
        for l in range(1, config.L + 1):
            idx = run.next_batch()
            lam, tape = mlp_forward(dual, data.x[idx])
            resid = lam - targets[idx]
            loss = float((resid * resid).mean())
            lr = run.lr()
            run.record(k, l, loss, state.rho, v_k)
            grad = 2.0 * resid / resid.size
            grads, _ = mlp_backward(dual, tape, grad)
            adam_step(dual, grads, dual_adam, lr)

        new_rho = update_penalty(state.rho, v_k, state.v_prev, config)
        outer_log.append({"outer_k": k, "rho": state.rho, "v_k": v_k,
                          "mean_objective": _mean_objective(pipe, primal, data)})
        state = TrainerState(rho=new_rho, v_prev=v_k, outer=k, inner=config.L)
        if checkpoint_cb is not None:
            checkpoint_cb(k, primal, primal_adam, dual, dual_adam, state)

    return TrainResult(method="pdl", primal=primal, primal_adam=primal_adam,
                       dual=dual, dual_adam=dual_adam, state=state, log=run.log,
                       outer_log=outer_log, wall_s=time.perf_counter() - t_start)


def _dual_outputs(dual: MlpParams, data: _Stacked, cont: ContingencySet) -> np.ndarray:
    out = np.empty((data.n, max(cont.n_gen, 1)))
    for lo in range(0, data.n, EVAL_CHUNK):
        sl = slice(lo, lo + EVAL_CHUNK)
        out[sl], _ = mlp_forward(dual, data.x[sl])
    return out[:, :cont.n_gen] if cont.n_gen else out[:, :0]


def _residuals_all(pipe: PrimalPipeline, primal: MlpParams, data: _Stacked) -> np.ndarray:
    rows = []
    for lo in range(0, data.n, EVAL_CHUNK):
        sl = slice(lo, lo + EVAL_CHUNK)
        z, _ = mlp_forward(primal, data.x[sl])
        st = pipe.forward(z, data.d[sl], data.gub[sl], with_slacks=False)
        rows.append(st.h)
    return np.concatenate(rows, axis=0)


def train_penalty(case: GridCase, factors: LinearFactors, cont: ContingencySet,
                  instances: list[Instance], config: TrainerConfig,
                  checkpoint_cb=None) -> TrainResult:
    """Self-supervised baseline: objective plus rho * sum h^2, same penalty
    schedule as the primal-dual trainer, no multiplier network.  Runs 2L
    inner steps per outer iteration so the total step count matches."""
    t_start = time.perf_counter()
    data = stack_instances(instances)
    pipe = PrimalPipeline(case, factors, cont, t=config.bisect_iters)
    primal, _ = build_networks(case, cont, data.x.shape[1], config.seed, need_dual=False)
    primal_adam = AdamState.for_params(primal)
    state = TrainerState(rho=config.rho0)
    run = _Run(config, data.n)
    outer_log = []
    v_k = float("nan")

    for k in range(1, config.K + 1):
        for l in range(1, 2 * config.L + 1):
            idx = run.next_batch()
            z, tape, st = _forward_batch(pipe, primal, data, idx)
            obj = pipe.objective(st, data.c[idx])
            h = st.h
            loss_vec = obj / config.obj_scale + state.rho * (h * h).sum(-1)
            g_t, g_k = pipe.objective_grads(st, data.c[idx])
            g_t = g_t / config.obj_scale
            g_k = g_k / config.obj_scale + 2.0 * state.rho * h[..., None]
            loss = float(loss_vec.mean())
            lr = run.lr()
            run.record(k, l, loss, state.rho, v_k)
            _apply_step(pipe, primal, tape, st, g_t, g_k, primal_adam, lr,
                        config.batch)
        v_k = max_violation(pipe, primal, data)
        new_rho = update_penalty(state.rho, v_k, state.v_prev, config)
        outer_log.append({"outer_k": k, "rho": state.rho, "v_k": v_k,
                          "mean_objective": _mean_objective(pipe, primal, data)})
        state = TrainerState(rho=new_rho, v_prev=v_k, outer=k, inner=2 * config.L)
        if checkpoint_cb is not None:
            checkpoint_cb(k, primal, primal_adam, None, None, state)

    return TrainResult(method="penalty", primal=primal, primal_adam=primal_adam,
                       dual=None, dual_adam=None, state=state, log=run.log,
                       outer_log=outer_log, wall_s=time.perf_counter() - t_start)


def _supervised(method: str, case, factors, cont, instances, g_star, config,
                checkpoint_cb=None) -> TrainResult:
    t_start = time.perf_counter()
    data = stack_instances(instances, g_star=g_star)
    if data.g_star is None:
        raise DataError(f"{method} training requires reference dispatch labels; "
                        "label the dataset with the oracle first")
    pipe = PrimalPipeline(case, factors, cont, t=config.bisect_iters)
    primal, _ = build_networks(case, cont, data.x.shape[1], config.seed, need_dual=False)
    primal_adam = AdamState.for_params(primal)
    state = TrainerState(rho=LD_PENALTY if method == "ld" else 0.0)
    run = _Run(config, data.n)
    with_h = method == "ld"

    for k in range(1, config.K + 1):
        for l in range(1, 2 * config.L + 1):
            idx = run.next_batch()
            z, tape, st = _forward_batch(pipe, primal, data, idx, with_slacks=False)
            diff = st.gtilde - data.g_star[idx]
            dist = np.linalg.norm(diff, axis=-1)
            g_t = diff / np.maximum(dist, 1e-12)[..., None]
            loss_vec = dist
            g_k = None
            if with_h:
                h = st.h
                loss_vec = loss_vec + LD_PENALTY * (h * h).sum(-1)
                g_k = 2.0 * LD_PENALTY * h[..., None] * np.ones(case.n_gen)
            loss = float(loss_vec.mean())
            lr = run.lr()
            run.record(k, l, loss, state.rho, float("nan"))
            _apply_step(pipe, primal, tape, st, g_t, g_k, primal_adam, lr,
                        config.batch)
        state = TrainerState(rho=state.rho, v_prev=state.v_prev, outer=k,
                             inner=2 * config.L)
        if checkpoint_cb is not None:
            checkpoint_cb(k, primal, primal_adam, None, None, state)

    return TrainResult(method=method, primal=primal, primal_adam=primal_adam,
                       dual=None, dual_adam=None, state=state, log=run.log,
                       outer_log=[], wall_s=time.perf_counter() - t_start)


def train_naive(case, factors, cont, instances, g_star, config,
                checkpoint_cb=None) -> TrainResult:
    """Supervised baseline: Euclidean distance between the repaired dispatch
    and the reference dispatch."""
    return _supervised("naive", case, factors, cont, instances, g_star, config,
                       checkpoint_cb)


def train_ld(case, factors, cont, instances, g_star, config,
             checkpoint_cb=None) -> TrainResult:
    """Supervised baseline: distance loss plus a fixed-coefficient squared
    penalty on the contingency balance residuals."""
    return _supervised("ld", case, factors, cont, instances, g_star, config,
                       checkpoint_cb)


def train(method: str, case, factors, cont, instances, config,
          g_star=None, checkpoint_cb=None) -> TrainResult:
    if method == "pdl":
        return train_pdl(case, factors, cont, instances, config, checkpoint_cb)
    if method == "penalty":
        return train_penalty(case, factors, cont, instances, config, checkpoint_cb)
    if method == "naive":
        return train_naive(case, factors, cont, instances, g_star, config, checkpoint_cb)
    if method == "ld":
        return train_ld(case, factors, cont, instances, g_star, config, checkpoint_cb)
    raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")

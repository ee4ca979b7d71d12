import numpy as np
import pytest

from scopflearn.errors import ConfigError
from scopflearn.layers import (
    PrimalPipeline,
    binary_search_batch,
    binary_search_layer,
    bound_map,
    bound_map_vjp,
    repair_layer,
    repair_layer_vjp,
    sigmoid,
)
from scopflearn.sampling import PerturbationConfig, sample_dataset

from oracles import exact_response_signal, fd_gradient, fd_jacobian, rel_err


# ---------------------------------------------------------------------------
# bound map

def test_bound_map_midpoint_and_saturation():
    glb = np.array([0.0, 1.0])
    gub = np.array([2.0, 3.0])
    g, _ = bound_map(np.zeros(2), glb, gub)
    assert np.allclose(g, (glb + gub) / 2)
    g, _ = bound_map(np.full(2, 40.0), glb, gub)
    assert np.allclose(g, gub)
    g, _ = bound_map(np.full(2, -40.0), glb, gub)
    assert np.allclose(g, glb)


def test_bound_map_jacobian_fd():
    rng = np.random.default_rng(0)
    glb = np.array([0.0, 0.5, -1.0])
    gub = np.array([2.0, 1.5, 1.0])
    for _ in range(10):
        z = rng.normal(scale=2.0, size=3)
        _, sig = bound_map(z, glb, gub)
        analytic = np.diag(bound_map_vjp(np.ones(3), sig, glb, gub))
        fd = fd_jacobian(lambda v: bound_map(v, glb, gub)[0], z, h=1e-5)
        assert rel_err(analytic, fd) <= 1e-6


# ---------------------------------------------------------------------------
# repair layer

def test_repair_identity_when_balanced():
    glb = np.zeros(2)
    gub = np.full(2, 2.0)
    g, _ = repair_layer(np.array([0.7, 1.3]), 2.0, glb, gub)
    assert np.allclose(g, [0.7, 1.3])


def test_repair_deficit_arithmetic():
    g, ctx = repair_layer(np.array([0.5, 0.5]), 2.0, np.zeros(2), np.full(2, 2.0))
    assert np.isclose(ctx.zeta, 1 / 3)
    assert np.allclose(g, [1.0, 1.0])


def test_repair_surplus_arithmetic():
    g, ctx = repair_layer(np.array([1.5, 1.5]), 2.0, np.zeros(2), np.full(2, 2.0))
    assert np.isclose(ctx.zeta, 1 / 3)
    assert np.allclose(g, [1.0, 1.0])


def test_repair_degenerate_returns_bound():
    gub = np.array([1.0, 1.0])
    g, _ = repair_layer(gub.copy(), 2.0, np.zeros(2), gub)
    assert np.allclose(g, gub)
    glb = np.array([0.2, 0.3])
    g, _ = repair_layer(glb.copy(), 0.4, glb, np.full(2, 2.0))
    assert np.allclose(g, glb)


def test_repair_feasibility_fuzz():
    rng = np.random.default_rng(1)
    n = 10_000
    n_gen = 4
    glb = np.tile(rng.uniform(0.0, 0.3, n_gen), (n, 1))
    gub = glb + rng.uniform(0.5, 2.0, (n, n_gen))
    gcheck = glb + rng.uniform(0.0, 1.0, (n, n_gen)) * (gub - glb)
    frac = rng.uniform(0.0, 1.0, n)
    d_total = glb.sum(-1) + frac * (gub.sum(-1) - glb.sum(-1))
    gtilde, _ = repair_layer(gcheck, d_total, glb, gub)
    assert np.max(np.abs(gtilde.sum(-1) - d_total)) <= 1e-9
    assert np.all(gtilde >= glb - 1e-12)
    assert np.all(gtilde <= gub + 1e-12)


def test_repair_jacobian_fd_both_branches():
    rng = np.random.default_rng(2)
    glb = np.array([0.0, 0.1, 0.2])
    gub = np.array([2.0, 1.8, 1.5])
    for d_total in (2.5, 1.0):  # deficit for mid dispatch, then surplus
        for _ in range(10):
            gcheck = glb + rng.uniform(0.2, 0.8, 3) * (gub - glb)
            _, ctx = repair_layer(gcheck, d_total, glb, gub)

            def frozen(v, branch=ctx.deficit):
                g, c2 = repair_layer(v, d_total, glb, gub)
                assert c2.deficit == branch  # stay off the branch boundary
                return g

            fd = fd_jacobian(frozen, gcheck, h=1e-6)
            for i in range(3):
                seed_vec = np.zeros(3)
                seed_vec[i] = 1.0
                row = repair_layer_vjp(seed_vec, ctx)
                assert rel_err(row, fd[i]) <= 1e-6


# ---------------------------------------------------------------------------
# bisection layer

def test_bisection_exact_first_midpoint():
    gk, nk, rho = binary_search_layer(
        g=np.array([1.0, 1.0]), d_total=2.0, k=1,
        gamma=np.array([1.0, 1.0]), ghat=np.array([2.0, 2.0]),
        gub=np.array([3.0, 3.0]), t=25)
    assert nk == 0.5
    assert np.allclose(gk, [2.0, 0.0])
    assert np.all(rho == 0.0)
    assert gk.sum() - 2.0 == 0.0


def test_bisection_infeasible_saturates():
    gk, nk, rho = binary_search_layer(
        g=np.array([1.0, 1.0]), d_total=2.0, k=1,
        gamma=np.array([1.0, 1.0]), ghat=np.array([2.0, 2.0]),
        gub=np.array([1.5, 3.0]), t=25)
    assert np.allclose(gk, [1.5, 0.0])
    assert nk >= 1.0 - 2.0 ** -24
    assert np.isclose(gk.sum() - 2.0, -0.5)
    assert rho[0] == 1.0 and rho[1] == 0.0


def test_bisection_overgeneration_saturates_low():
    # even n = 0 leaves a surplus: signal converges to 0
    gk, nk, rho = binary_search_layer(
        g=np.array([2.0, 1.0]), d_total=1.5, k=1,
        gamma=np.array([1.0, 1.0]), ghat=np.array([1.0, 1.0]),
        gub=np.array([3.0, 3.0]), t=25)
    assert nk <= 2.0 ** -24
    assert gk.sum() - 1.5 > 0


@pytest.mark.parametrize("t", [10, 25])
def test_bisection_accuracy_bound(t):
    # three symmetric generators, one outaged; closed-form root
    g = np.array([1.0, 1.0, 1.0])
    gamma = np.full(3, 1.0)
    ghat = np.full(3, 2.0)
    gub = np.full(3, 4.0)
    d_total = 3.0  # outage removes 1.0; survivors each pick up 0.5 => n* = 0.25
    gk, nk, rho = binary_search_layer(g, d_total, 2, gamma, ghat, gub, t=t)
    assert abs(nk - 0.25) <= 2.0 ** -t
    droop_sum = (gamma * ghat)[[0, 1]].sum()
    assert abs(gk.sum() - d_total) <= 2.0 ** -t * droop_sum


def test_bisection_residual_nonincreasing_in_t():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n_gen = 4
        glb = np.zeros(n_gen)
        gub = rng.uniform(0.5, 2.0, n_gen)
        g = rng.uniform(0, 1, n_gen) * gub
        gamma = rng.uniform(0.2, 1.0, n_gen)
        k = int(rng.integers(n_gen))
        d_total = g.sum()
        r = []
        for t in (5, 10, 20, 40):
            gk, _, _ = binary_search_layer(g, d_total, k, gamma, gub, gub, t=t)
            r.append(abs(gk.sum() - d_total))
        assert r[1] <= r[0] + 1e-15 and r[2] <= r[1] + 1e-15 and r[3] <= r[2] + 1e-15


def test_bisection_matches_exact_root():
    rng = np.random.default_rng(4)
    for _ in range(100):
        n_gen = 5
        gub = rng.uniform(0.5, 2.0, n_gen)
        g = rng.uniform(0.1, 1.0, n_gen) * gub
        gamma = rng.uniform(0.2, 1.2, n_gen)
        k = int(rng.integers(n_gen))
        d_total = g.sum() * rng.uniform(0.9, 1.0)
        gk, nk, _ = binary_search_layer(g, d_total, k, gamma, gub, gub, t=40)
        n_star = exact_response_signal(g, k, gamma, gub, gub, d_total)
        assert abs(nk - n_star) <= 2.0 ** -40 + 1e-12


def test_bisection_structure_invariants_fuzz():
    rng = np.random.default_rng(5)
    for _ in range(200):
        n_gen = 4
        glb = np.zeros(n_gen)
        gub = rng.uniform(0.5, 2.0, n_gen)
        g = rng.uniform(0, 1, n_gen) * gub
        gamma = rng.uniform(0.2, 1.5, n_gen)
        k = int(rng.integers(n_gen))
        gk, nk, rho = binary_search_layer(g, g.sum(), k, gamma, gub, gub, t=25)
        assert gk[k] == 0.0 and rho[k] == 0.0
        assert 0.0 <= nk <= 1.0
        mask = np.arange(n_gen) != k
        assert np.all(gk[mask] <= gub[mask] + 1e-15)
        assert np.all(gk[mask] >= g[mask] - 1e-15)
        raw = g + nk * gamma * gub
        assert np.array_equal(rho[mask], (raw[mask] > gub[mask]).astype(float))


def test_bisection_batch_matches_scalar():
    rng = np.random.default_rng(6)
    n_gen, n_batch = 4, 16
    gub = rng.uniform(0.5, 2.0, (n_batch, n_gen))
    g = rng.uniform(0.1, 1.0, (n_batch, n_gen)) * gub
    gamma = rng.uniform(0.3, 1.0, n_gen)
    d_total = g.sum(-1) * rng.uniform(0.85, 1.05, n_batch)
    kg = np.array([0, 2, 3])
    gk, nk, rho = binary_search_batch(g, d_total, kg, gamma, gub, gub, t=25)
    for b in range(n_batch):
        for j, k in enumerate(kg):
            gk1, n1, rho1 = binary_search_layer(
                g[b], d_total[b], int(k), gamma, gub[b], gub[b], t=25)
            assert np.allclose(gk[b, j], gk1, atol=1e-12)
            assert np.isclose(nk[b, j], n1)
            assert np.array_equal(rho[b, j], rho1)


def test_bisection_rejects_bad_iteration_count():
    with pytest.raises(ConfigError):
        binary_search_layer(np.ones(2), 1.0, 0, np.ones(2), np.ones(2),
                            np.full(2, 2.0), t=0)


# ---------------------------------------------------------------------------
# full pipeline gradient checks

def _random_nonboundary_points(pipe, case, cont, n_points, seed=7):
    """Sample raw outputs whose tape sits safely away from every branch
    boundary: repair-branch flip, cap ties, and slack kinks."""
    rng = np.random.default_rng(seed)
    cfg = PerturbationConfig(seed=seed)
    instances, _ = sample_dataset(case, cfg, n_points, cont=cont)
    picked = []
    for inst in instances:
        for _ in range(50):
            z = rng.normal(scale=1.5, size=case.n_gen)
            state = pipe.forward(z, inst.d, inst.gub)
            margin = min(
                abs(state.repair_ctx.s - state.d_total).min(),
                _cap_margin(state, pipe),
                _kink_margin(state, pipe),
            )
            if margin > 1e-3:
                picked.append((z, inst, state))
                break
    return picked


def _cap_margin(state, pipe):
    raw = state.gtilde[:, None, :] + state.nk[..., None] * (
        pipe.gamma * (state.gub - state.glb))[:, None, :]
    gaps = np.abs(raw - state.gub[:, None, :])
    rows = np.arange(pipe.kg.size)
    gaps[:, rows, pipe.kg] = np.inf
    return gaps.min()


def _kink_margin(state, pipe):
    def margin(f):
        return min(np.abs(f - pipe.fub).min(), np.abs(f - pipe.flb).min())

    m = margin(state.f0)
    fg = state.f0  # placeholder replaced below
    flow_d = state.f0 + state.gtilde @ pipe.phi_gen.T
    fg = flow_d[:, None, :] - state.gk @ pipe.phi_gen.T
    m = min(m, margin(fg))
    if pipe.ke.size:
        post = state.f0[:, None, :] + state.f0[:, pipe.ke, None] * pipe.lodf_ke[None, :, :]
        rows = np.arange(pipe.ke.size)
        post[:, rows, pipe.ke] = 0.0
        keep = np.ones_like(post, bool)
        keep[:, rows, pipe.ke] = False
        m = min(m, np.abs(post[keep] - np.broadcast_to(pipe.fub, post.shape)[keep]).min(),
                np.abs(post[keep] - np.broadcast_to(pipe.flb, post.shape)[keep]).min())
    return m


def test_pipeline_gradient_matches_fd(m5_case, m5_factors, m5_cont):
    pipe = PrimalPipeline(m5_case, m5_factors, m5_cont)
    rho_pen = 2.0
    lam = np.array([0.3, -0.2, 0.5])
    points = _random_nonboundary_points(pipe, m5_case, m5_cont, 20)
    assert len(points) >= 15
    for z, inst, state in points:
        grad_gtilde, grad_gk = pipe.objective_grads(state, inst.c)
        grad_gk = grad_gk + (lam + rho_pen * state.h)[..., None]
        grad_z = pipe.backward(state, grad_gtilde, grad_gk)[0]

        def loss(v):
            obj, h, _ = pipe.frozen_forward_objective(v[None, :], state,
                                                      inst.d[None, :], inst.c)
            return obj[0] + lam @ h[0] + 0.5 * rho_pen * (h[0] ** 2).sum()

        fd = fd_gradient(loss, z, h=1e-6)
        assert rel_err(grad_z, fd, floor=1e-6) <= 1e-4


def test_pipeline_balance_guarantee(m5_case, m5_factors, m5_cont):
    pipe = PrimalPipeline(m5_case, m5_factors, m5_cont)
    cfg = PerturbationConfig(seed=8)
    instances, _ = sample_dataset(m5_case, cfg, 50, cont=m5_cont)
    rng = np.random.default_rng(8)
    for inst in instances:
        z = rng.normal(scale=2.0, size=m5_case.n_gen)
        state = pipe.forward(z, inst.d, inst.gub)
        assert abs(state.gtilde.sum() - inst.d_total) <= 1e-9
        assert np.all(state.gtilde >= m5_case.glb - 1e-12)
        assert np.all(state.gtilde <= inst.gub + 1e-12)
        # every outage either balances to bisection precision or the search
        # saturated at a signal boundary with a signed shortfall
        droop_total = (m5_case.gamma * (inst.gub - m5_case.glb)).sum()
        for j in range(state.h.shape[1]):
            h = state.h[0, j]
            nk = state.nk[0, j]
            if abs(h) > 2.0 ** -25 * droop_total:
                assert nk <= 2.0 ** -25 or nk >= 1.0 - 2.0 ** -25


def test_pipeline_objective_matches_scopf_eval(m5_case, m5_factors, m5_cont):
    from scopflearn.scopf import balance_residuals, evaluate_estimate, scopf_objective

    pipe = PrimalPipeline(m5_case, m5_factors, m5_cont)
    cfg = PerturbationConfig(seed=9)
    instances, _ = sample_dataset(m5_case, cfg, 10, cont=m5_cont)
    rng = np.random.default_rng(9)
    for inst in instances:
        z = rng.normal(scale=1.0, size=m5_case.n_gen)
        state = pipe.forward(z, inst.d, inst.gub)
        est = evaluate_estimate(inst, state.gtilde[0], state.gk[0], state.nk[0],
                                state.rho[0], m5_case, m5_factors, m5_cont)
        assert np.isclose(pipe.objective(state, inst.c)[0],
                          scopf_objective(inst, est, m5_case), rtol=1e-12)
        assert np.allclose(state.h[0], balance_residuals(est, inst))
        assert np.allclose(state.eta0[0], est.eta0)
        assert np.allclose(state.eta_g[0], est.eta_g)
        assert np.allclose(state.eta_e[0], est.eta_e)

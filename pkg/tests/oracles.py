"""Independent reference implementations used to cross-check the package.

Nothing here imports computational code from scopflearn beyond the plain
GridCase data container: flows are recomputed by solving the bus angle
system from scratch, contingency responses by exact piecewise-linear root
finding, and line outages by rebuilding the reduced network.
"""

import numpy as np


def solve_dc_flows(n_bus, line_from, line_to, susceptance, slack_bus, injections):
    """Line flows from bus injections via a fresh angle solve (theta_slack = 0)."""
    injections = np.asarray(injections, float)
    n_line = len(line_from)
    A = np.zeros((n_line, n_bus))
    A[np.arange(n_line), line_from] = 1.0
    A[np.arange(n_line), line_to] = -1.0
    Bbus = A.T @ (susceptance[:, None] * A)
    keep = np.arange(n_bus) != slack_bus
    theta = np.zeros(n_bus)
    theta[keep] = np.linalg.solve(Bbus[np.ix_(keep, keep)], injections[keep])
    return susceptance * (A @ theta)


def case_flows(case, g, d):
    """Base-case flows for dispatch g and per-load-unit demand d."""
    inj = np.zeros(case.n_bus)
    np.add.at(inj, case.gen_bus, np.asarray(g, float))
    np.subtract.at(inj, case.load_bus, np.asarray(d, float))
    return solve_dc_flows(case.n_bus, case.line_from, case.line_to,
                          case.susceptance, case.slack_bus, inj)


def case_flows_without_line(case, k, g, d):
    """Post-outage flows, recomputed on the network with line k removed."""
    keep = np.arange(case.n_line) != k
    inj = np.zeros(case.n_bus)
    np.add.at(inj, case.gen_bus, np.asarray(g, float))
    np.subtract.at(inj, case.load_bus, np.asarray(d, float))
    full = solve_dc_flows(case.n_bus, case.line_from[keep], case.line_to[keep],
                          case.susceptance[keep], case.slack_bus, inj)
    out = np.zeros(case.n_line)
    out[keep] = full
    return out


def exact_response_signal(g, k, gamma, ghat, gub, d_total):
    """Exact root of sum_i min(g_i + n*gamma_i*ghat_i, gub_i) = d_total over
    n in [0, 1], for outage k.  Returns the clipped boundary value when no
    root exists.  Piecewise-linear walk over the cap breakpoints; no bisection.
    """
    g = np.asarray(g, float).copy()
    mask = np.ones(len(g), bool)
    mask[k] = False
    gs, slopes, caps = g[mask], (gamma * ghat)[mask], gub[mask]

    def total(n):
        return np.minimum(gs + n * slopes, caps).sum()

    if total(0.0) >= d_total:
        return 0.0
    if total(1.0) <= d_total:
        return 1.0
    # breakpoints where a generator hits its cap
    with np.errstate(divide="ignore", invalid="ignore"):
        bps = np.where(slopes > 0, (caps - gs) / slopes, np.inf)
    knots = np.unique(np.concatenate([[0.0, 1.0], bps[(bps > 0) & (bps < 1)]]))
    for lo, hi in zip(knots[:-1], knots[1:]):
        tlo, thi = total(lo), total(hi)
        if tlo <= d_total <= thi:
            if thi == tlo:
                return lo
            return lo + (d_total - tlo) * (hi - lo) / (thi - tlo)
    raise AssertionError("root bracketing failed")


def apr_dispatch(g, n, k, gamma, ghat, gub):
    gk = np.minimum(np.asarray(g, float) + n * gamma * ghat, gub)
    gk[k] = 0.0
    return gk


def slack_from_flows(f, flb, fub):
    return np.maximum(0.0, np.maximum(f - fub, flb - f))


def full_objective(case, kg, ke, g, d, c, gub, tol=1e-6, t_unused=None):
    """Independent evaluation of cost plus penalized thermal slacks, with the
    contingency balance treated as a hard constraint (returns +inf when any
    admissible generator outage cannot be balanced within tol)."""
    g = np.asarray(g, float)
    d = np.asarray(d, float)
    gamma, ghat = case.gamma, np.asarray(gub, float) - case.glb
    d_total = d.sum()
    total = float(np.dot(c, g))
    f0 = case_flows(case, g, d)
    total += case.Pi * slack_from_flows(f0, case.flb, case.fub).sum()
    for k in kg:
        n = exact_response_signal(g, k, gamma, ghat, np.asarray(gub, float), d_total)
        gk = apr_dispatch(g, n, k, gamma, ghat, np.asarray(gub, float))
        if abs(gk.sum() - d_total) > tol:
            return np.inf
        fk = case_flows(case, gk, d)
        total += case.Pi * slack_from_flows(fk, case.flb, case.fub).sum()
    for k in ke:
        fk = case_flows_without_line(case, k, g, d)
        eta = slack_from_flows(fk, case.flb, case.fub)
        eta[k] = 0.0
        total += case.Pi * eta.sum()
    return total


def fd_gradient(fun, x, h=1e-6):
    """Central-difference gradient of a scalar function of a 1-D array."""
    x = np.asarray(x, float)
    grad = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        grad[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return grad


def fd_jacobian(fun, x, h=1e-6):
    """Central-difference Jacobian of a vector function of a 1-D array."""
    x = np.asarray(x, float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((fun(x + e) - fun(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.max(np.abs(a - b) / np.maximum(floor, np.maximum(np.abs(a), np.abs(b))))

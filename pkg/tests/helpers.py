"""Shared test-side builders for synthetic TS structures and oracles."""
import itertools

import numpy as np

from tsdrive.tsmodel import SchedulingDomain, TSModel, TSSubModel


def center_for_degree(degree: float) -> float:
    """Center of a unit bell (a=1, b=1) giving `degree` at z = 0."""
    return float(np.sqrt(1.0 / degree - 1.0))


def make_sub(mf_a, mf_b, mf_c, theta=None, target=0) -> TSSubModel:
    mf_a = np.atleast_2d(np.asarray(mf_a, dtype=float))
    n_in, n_mf = mf_a.shape
    n_rules = n_mf ** n_in
    if theta is None:
        theta = np.zeros((n_rules, n_in + 1))
    return TSSubModel(mf_a, mf_b, mf_c, theta, target)


def random_sub(rng, n_in=2, n_mf=2, target=0, span=(-1.0, 1.0)) -> TSSubModel:
    lo, hi = span
    width = (hi - lo) / (2 * (n_mf - 1))
    mf_c = np.linspace(lo, hi, n_mf)[None, :].repeat(n_in, axis=0)
    mf_c = mf_c + rng.uniform(-0.2, 0.2, size=mf_c.shape) * width
    mf_a = np.full((n_in, n_mf), width) * rng.uniform(0.7, 1.4, (n_in, n_mf))
    mf_b = rng.uniform(1.2, 3.0, (n_in, n_mf))
    theta = rng.normal(size=(n_mf ** n_in, n_in + 1))
    return TSSubModel(mf_a, mf_b, mf_c, theta, target)


def constant_consequent_model(rows, dt=1.0 / 30.0) -> TSModel:
    """5-input vehicle-shaped model whose every rule in sub-model j carries
    the same consequent rows[j]; blending must reproduce rows exactly."""
    domain = SchedulingDomain(lower=[0.1, -0.15, -2.0, -0.25, -1.0],
                              upper=[2.7, 0.15, 2.0, 0.25, 4.0])
    subs = []
    for j in range(3):
        mf_c = np.stack([domain.lower, domain.upper], axis=1)
        mf_a = np.repeat((domain.span / 2.0)[:, None], 2, axis=1)
        mf_b = np.full((5, 2), 2.0)
        theta = np.tile(np.asarray(rows[j], dtype=float), (32, 1))
        subs.append(TSSubModel(mf_a, mf_b, mf_c, theta, j))
    return TSModel(subs, dt, domain)


def active_set_oracle(qp):
    """Exhaustive enumeration over active subsets of all inequality-type
    rows; the independent optimum for small strictly convex problems."""
    rows = [qp.A_in[i] for i in range(qp.b_in.size)]
    rhs = [qp.b_in[i] for i in range(qp.b_in.size)]
    for j in range(qp.n):
        if np.isfinite(qp.ub[j]):
            e = np.zeros(qp.n)
            e[j] = 1.0
            rows.append(e)
            rhs.append(qp.ub[j])
        if np.isfinite(qp.lb[j]):
            e = np.zeros(qp.n)
            e[j] = -1.0
            rows.append(e)
            rhs.append(-qp.lb[j])
    rows = np.asarray(rows)
    rhs = np.asarray(rhs)
    m = rhs.size
    best_obj, best_x = np.inf, None
    for size in range(qp.n + 1):
        for S in itertools.combinations(range(m), size):
            S = list(S)
            A_act = rows[S]
            K = np.zeros((qp.n + size, qp.n + size))
            K[:qp.n, :qp.n] = qp.H
            K[:qp.n, qp.n:] = A_act.T
            K[qp.n:, :qp.n] = A_act
            r = np.concatenate([-qp.f, rhs[S]])
            try:
                sol = np.linalg.solve(K, r)
            except np.linalg.LinAlgError:
                continue
            x, lam = sol[:qp.n], sol[qp.n:]
            if lam.size and np.min(lam) < -1e-9:
                continue
            if m and np.max(rows @ x - rhs) > 1e-9:
                continue
            obj = qp.objective(x)
            if obj < best_obj - 1e-12:
                best_obj, best_x = obj, x
    return best_obj, best_x


def random_strictly_convex_qp(rng, n_max=6, m_in_max=8):
    """Feasible-by-construction strictly convex QP with box + inequalities."""
    from tsdrive.qp import QpProblem

    n = int(rng.integers(2, n_max + 1))
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.5 * np.eye(n)
    x0 = rng.normal(size=n)
    f = rng.normal(size=n)
    m_in = int(rng.integers(1, m_in_max + 1))
    A_in = rng.normal(size=(m_in, n))
    b_in = A_in @ x0 + np.abs(rng.normal(size=m_in)) * 0.5
    lb = x0 - np.abs(rng.normal(size=n)) * 2.0
    ub = x0 + np.abs(rng.normal(size=n)) * 2.0
    lb[rng.uniform(size=n) < 0.3] = -np.inf
    ub[rng.uniform(size=n) < 0.3] = np.inf
    return QpProblem(H, f, A_in=A_in, b_in=b_in, lb=lb, ub=ub)

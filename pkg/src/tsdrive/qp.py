"""Dense convex QP solver shared by the predictive controller and the
moving-horizon estimator.

The algorithm is ADMM with operator splitting on the consensus form

    minimize    0.5 x'Hx + f'x
    subject to  l <= Ax <= u

where A stacks the inequality rows (upper-bounded), the equality rows
(l == u) and the variable box. Iterations have fixed cost (one back-solve of
a cached KKT factorization), warm-start from a previous solution, and an
active-set polish step sharpens converged solutions to near machine
precision. An exhaustive active-set enumerator lives in the test suite as
the independent oracle; it is never used here.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
PRIMAL_INFEASIBLE = "primal_infeasible"

RHO_EQ_SCALE = 1e3
RHO_MIN, RHO_MAX = 1e-6, 1e6


@dataclass(frozen=True)
class QpSettings:
    eps_abs: float = 1e-8
    eps_rel: float = 1e-8
    max_iter: int = 20000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    check_every: int = 10
    rho_update_every: int = 50   # adaptive-rho period
    adaptive_rho: bool = True
    eps_pinf: float = 1e-8
    polish: bool = True


@dataclass(frozen=True)
class KktResiduals:
    stationarity: float
    primal: float
    dual: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.primal, self.dual,
                   self.complementarity)


@dataclass(frozen=True)
class QpDuals:
    """Multipliers in the sign convention lambda >= 0 for inequalities and
    bounds; nu free for equalities."""

    ineq: np.ndarray
    eq: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


class QpProblem:
    """min 0.5 x'Hx + f'x  s.t.  A_in x <= b_in, A_eq x = b_eq, lb <= x <= ub.

    H is symmetrized and checked positive semidefinite to tolerance 1e-10;
    eigenvalues below the tolerance are floored to it (a warning is emitted
    only when the input was genuinely indefinite, not merely singular).
    """

    def __init__(self, H, f, A_in=None, b_in=None, A_eq=None, b_eq=None,
                 lb=None, ub=None):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        f = np.atleast_1d(np.asarray(f, dtype=float))
        n = f.size
        if H.shape != (n, n):
            raise ValueError(f"H must be ({n}, {n}), got {H.shape}")
        asym = np.max(np.abs(H - H.T)) if n else 0.0
        if asym > 1e-8 * max(1.0, np.max(np.abs(H))):
            raise ValueError("H must be symmetric")
        self.H = self._psd_repair(0.5 * (H + H.T))
        self.f = f
        self.n = n

        def _mat(A, b, what):
            if A is None:
                return np.zeros((0, n)), np.zeros(0)
            A = np.atleast_2d(np.asarray(A, dtype=float))
            b = np.atleast_1d(np.asarray(b, dtype=float))
            if A.shape != (b.size, n):
                raise ValueError(f"{what} dimensions inconsistent")
            return A, b

        self.A_in, self.b_in = _mat(A_in, b_in, "inequality")
        self.A_eq, self.b_eq = _mat(A_eq, b_eq, "equality")
        self.lb = np.full(n, -np.inf) if lb is None \
            else np.asarray(lb, dtype=float).reshape(n).copy()
        self.ub = np.full(n, np.inf) if ub is None \
            else np.asarray(ub, dtype=float).reshape(n).copy()
        if np.any(self.lb > self.ub):
            raise ValueError("lb must be <= ub")

    @staticmethod
    def _psd_repair(H, tol=1e-10):
        if H.size == 0:
            return H
        w, V = np.linalg.eigh(H)
        if w[0] >= tol:
            return H
        if w[0] < -tol:
            warnings.warn(
                f"cost matrix indefinite (min eigenvalue {w[0]:.3e}); "
                "flooring to PSD", stacklevel=3)
        w = np.maximum(w, tol)
        return (V * w) @ V.T

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.H @ x + self.f @ x)

    # --- internal stacked form l <= Ax <= u ------------------------------
    def stacked(self):
        box_idx = np.flatnonzero(np.isfinite(self.lb) | np.isfinite(self.ub))
        rows = [self.A_in, self.A_eq]
        if box_idx.size:
            E = np.zeros((box_idx.size, self.n))
            E[np.arange(box_idx.size), box_idx] = 1.0
            rows.append(E)
        A = np.vstack(rows) if rows else np.zeros((0, self.n))
        l = np.concatenate([np.full(self.b_in.size, -np.inf), self.b_eq,
                            self.lb[box_idx]])
        u = np.concatenate([self.b_in, self.b_eq, self.ub[box_idx]])
        return A, l, u, box_idx


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    status: str
    iterations: int
    kkt_residuals: KktResiduals
    duals: QpDuals
    # stacked-row multipliers and slacks kept for warm starting
    y_stacked: np.ndarray = field(repr=False, default=None)
    z_stacked: np.ndarray = field(repr=False, default=None)


def kkt_check(qp: QpProblem, x, duals: QpDuals) -> KktResiduals:
    """Residuals of the KKT conditions at (x, duals); all should vanish at
    an exact optimum."""
    x = np.asarray(x, dtype=float)
    lam, nu = duals.ineq, duals.eq
    lo, up = duals.lower, duals.upper

    grad = qp.H @ x + qp.f
    if lam.size:
        grad = grad + qp.A_in.T @ lam
    if nu.size:
        grad = grad + qp.A_eq.T @ nu
    grad = grad + up - lo
    stationarity = float(np.max(np.abs(grad))) if grad.size else 0.0

    primal = 0.0
    if qp.b_in.size:
        primal = max(primal, float(np.max(qp.A_in @ x - qp.b_in)))
    if qp.b_eq.size:
        primal = max(primal, float(np.max(np.abs(qp.A_eq @ x - qp.b_eq))))
    fin_l = np.isfinite(qp.lb)
    fin_u = np.isfinite(qp.ub)
    if fin_l.any():
        primal = max(primal, float(np.max(qp.lb[fin_l] - x[fin_l])))
    if fin_u.any():
        primal = max(primal, float(np.max(x[fin_u] - qp.ub[fin_u])))
    primal = max(primal, 0.0)

    dual = 0.0
    for v in (lam, lo, up):
        if v.size:
            dual = max(dual, float(np.max(-v)))
    dual = max(dual, 0.0)

    comp = 0.0
    if lam.size:
        comp = max(comp, float(np.max(np.abs(lam * (qp.A_in @ x - qp.b_in)))))
    if fin_l.any():
        comp = max(comp, float(np.max(np.abs(lo[fin_l] * (qp.lb[fin_l] - x[fin_l])))))
    if fin_u.any():
        comp = max(comp, float(np.max(np.abs(up[fin_u] * (x[fin_u] - qp.ub[fin_u])))))
    return KktResiduals(stationarity, primal, dual, comp)


def _split_duals(qp: QpProblem, y: np.ndarray, box_idx: np.ndarray) -> QpDuals:
    m_in, p = qp.b_in.size, qp.b_eq.size
    lam = np.maximum(y[:m_in], 0.0)
    nu = y[m_in:m_in + p].copy()
    lower = np.zeros(qp.n)
    upper = np.zeros(qp.n)
    y_box = y[m_in + p:]
    lower[box_idx] = np.maximum(-y_box, 0.0)
    upper[box_idx] = np.maximum(y_box, 0.0)
    return QpDuals(lam, nu, lower, upper)


class QpSolver:
    """ADMM workspace; one instance per thread. The KKT factorization is
    cached and reused while (H, A, rho) stay unchanged across solves."""

    def __init__(self, settings: QpSettings | None = None):
        self.settings = settings or QpSettings()
        self._cache_key = None
        self._cache_lu = None

    # KKT = [[H + sigma I, A'], [A, -diag(1/rho_vec)]]
    def _factorize(self, H, A, rho_vec):
        n, m = H.shape[0], A.shape[0]
        key = (H.tobytes(), A.tobytes(), rho_vec.tobytes())
        if self._cache_key == key:
            return self._cache_lu
        K = np.zeros((n + m, n + m))
        K[:n, :n] = H + self.settings.sigma * np.eye(n)
        K[:n, n:] = A.T
        K[n:, :n] = A
        K[n:, n:] = -np.diag(1.0 / rho_vec)
        lu = lu_factor(K)
        self._cache_key = key
        self._cache_lu = lu
        return lu

    def solve(self, qp: QpProblem, warm_start: QpSolution | None = None) -> QpSolution:
        s = self.settings
        A, l, u, box_idx = qp.stacked()
        n, m = qp.n, A.shape[0]

        if m == 0:
            x = np.linalg.lstsq(qp.H, -qp.f, rcond=None)[0]
            duals = QpDuals(np.zeros(0), np.zeros(0), np.zeros(n), np.zeros(n))
            res = kkt_check(qp, x, duals)
            status = OPTIMAL if res.max() < 10 * s.eps_abs else MAX_ITER
            return QpSolution(x, qp.objective(x), status, 0, res, duals,
                              np.zeros(0), np.zeros(0))

        eq_rows = l == u
        rho = s.rho
        rho_vec = np.where(eq_rows, RHO_EQ_SCALE * rho, rho)

        if warm_start is not None and warm_start.y_stacked is not None \
                and warm_start.y_stacked.size == m:
            x = warm_start.x.copy()
            y = warm_start.y_stacked.copy()
            z = np.clip(A @ x, l, u)
        else:
            x = np.zeros(n)
            y = np.zeros(m)
            z = np.clip(np.zeros(m), l, u)

        lu = self._factorize(qp.H, A, rho_vec)
        rhs = np.empty(n + m)
        status = MAX_ITER
        iterations = s.max_iter

        for k in range(1, s.max_iter + 1):
            rhs[:n] = s.sigma * x - qp.f
            rhs[n:] = z - y / rho_vec
            sol = lu_solve(lu, rhs)
            x_tilde, nu = sol[:n], sol[n:]
            z_tilde = z + (nu - y) / rho_vec

            x = s.alpha * x_tilde + (1.0 - s.alpha) * x
            z_relaxed = s.alpha * z_tilde + (1.0 - s.alpha) * z
            z_new = np.clip(z_relaxed + y / rho_vec, l, u)
            dy = rho_vec * (z_relaxed - z_new)
            y = y + dy
            z = z_new

            if k % s.check_every == 0 or k == s.max_iter:
                Ax = A @ x
                Hx = qp.H @ x
                ATy = A.T @ y
                r_prim = float(np.max(np.abs(Ax - z))) if m else 0.0
                r_dual = float(np.max(np.abs(Hx + qp.f + ATy)))
                sc_p = max(np.max(np.abs(Ax)), np.max(np.abs(z)), 1e-30)
                sc_d = max(np.max(np.abs(Hx)), np.max(np.abs(ATy)),
                           np.max(np.abs(qp.f)), 1e-30)
                if r_prim <= s.eps_abs + s.eps_rel * sc_p and \
                        r_dual <= s.eps_abs + s.eps_rel * sc_d:
                    status = OPTIMAL
                    iterations = k
                    break
                if self._primal_infeasible(A, l, u, dy, s.eps_pinf):
                    status = PRIMAL_INFEASIBLE
                    iterations = k
                    break
                if s.adaptive_rho and k % s.rho_update_every == 0:
                    ratio = np.sqrt((r_prim / sc_p) / max(r_dual / sc_d, 1e-30))
                    rho_new = float(np.clip(rho * ratio, RHO_MIN, RHO_MAX))
                    if rho_new > 5.0 * rho or rho_new < rho / 5.0:
                        rho = rho_new
                        rho_vec = np.where(eq_rows, RHO_EQ_SCALE * rho, rho)
                        lu = self._factorize(qp.H, A, rho_vec)

        if status == OPTIMAL and s.polish:
            x, y = self._polish(qp, A, l, u, x, y)

        duals = _split_duals(qp, y, box_idx)
        res = kkt_check(qp, x, duals)
        return QpSolution(x, qp.objective(x), status, iterations, res, duals,
                          y.copy(), z.copy())

    @staticmethod
    def _primal_infeasible(A, l, u, dy, eps) -> bool:
        norm = np.max(np.abs(dy)) if dy.size else 0.0
        if norm < 1e-14:
            return False
        d = dy / norm
        if np.max(np.abs(A.T @ d)) > eps:
            return False
        pos, neg = np.maximum(d, 0.0), np.minimum(d, 0.0)
        # infinite bounds with nonzero multiplier direction cannot certify
        if np.any(pos[~np.isfinite(u)] > eps) or np.any(neg[~np.isfinite(l)] < -eps):
            return False
        support = float(np.sum(u[np.isfinite(u)] * pos[np.isfinite(u)])
                        + np.sum(l[np.isfinite(l)] * neg[np.isfinite(l)]))
        return support < -eps

    def _polish(self, qp, A, l, u, x, y):
        """Equality-solve on the active set detected from the multipliers;
        accepted only if it reduces the worst KKT residual."""
        act_low = (y < -1e-12) & np.isfinite(l)
        act_up = (y > 1e-12) & np.isfinite(u)
        active = act_low | act_up
        b_act = np.where(act_low, l, u)[active]
        A_act = A[active]
        n, ma = qp.n, A_act.shape[0]
        delta = 1e-9
        K = np.zeros((n + ma, n + ma))
        K[:n, :n] = qp.H + delta * np.eye(n)
        K[:n, n:] = A_act.T
        K[n:, :n] = A_act
        K[n:, n:] = -delta * np.eye(ma)
        rhs = np.concatenate([-qp.f, b_act])
        try:
            lu = lu_factor(K)
        except np.linalg.LinAlgError:
            return x, y
        sol = lu_solve(lu, rhs)
        # iterative refinement against the unregularized KKT system
        K0 = K.copy()
        K0[:n, :n] -= delta * np.eye(n)
        K0[n:, n:] += delta * np.eye(ma)
        for _ in range(3):
            sol = sol + lu_solve(lu, rhs - K0 @ sol)
        x_pol = sol[:n]
        y_pol = np.zeros_like(y)
        y_pol[active] = sol[n:]
        if np.any(y_pol[act_low] > 0.0) or np.any(y_pol[act_up] < 0.0):
            return x, y

        def _score(xx, yy):
            r_p = np.max(np.maximum(A @ xx - u, 0.0) + np.maximum(l - A @ xx, 0.0))
            r_d = np.max(np.abs(qp.H @ xx + qp.f + A.T @ yy))
            return max(float(r_p), float(r_d))

        if _score(x_pol, y_pol) < _score(x, y):
            return x_pol, y_pol
        return x, y


def solve(qp: QpProblem, settings: QpSettings | None = None,
          warm_start: QpSolution | None = None) -> QpSolution:
    return QpSolver(settings).solve(qp, warm_start=warm_start)


def dump_problem(qp: QpProblem, path) -> None:
    """Plain-text dump (row-major dense blocks) for offline debugging."""
    with open(path, "w") as fh:
        fh.write("# dense QP dump: blocks H f A_in b_in A_eq b_eq lb ub\n")
        fh.write("# each block: name, rows, cols, then one row per line\n")
        for name, arr in [("H", qp.H), ("f", qp.f), ("A_in", qp.A_in),
                          ("b_in", qp.b_in), ("A_eq", qp.A_eq),
                          ("b_eq", qp.b_eq), ("lb", qp.lb), ("ub", qp.ub)]:
            mat = np.atleast_2d(arr)
            fh.write(f"{name} {mat.shape[0]} {mat.shape[1]}\n")
            for row in mat:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")

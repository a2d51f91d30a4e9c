"""Receding-horizon controller on the learned TS model.

Each tick: guess the scheduling trajectory over the horizon (planner
references blended with the previous optimal prediction), instantiate the
time-varying model matrices, condense the prediction into a dense QP over
the input increments, and solve it warm-started from the previous solution.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import qp as qpmod
from .tsmodel import TSModel, instantiate

# default steering/acceleration box and their per-step rate box
DEFAULT_INPUT_POLY = (
    np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]),
    np.array([0.249, 0.249, 4.0, 1.0]),
)
DEFAULT_RATE_POLY = (
    np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]),
    np.array([0.05, 0.05, 0.5, 0.5]),
)
DEFAULT_TERMINAL_BOX = (
    np.array([0.1, -0.12, -1.96]),
    np.array([2.7, 0.12, 1.96]),
)


def _default_q() -> np.ndarray:
    return 0.65 * np.diag([0.4, 1e-6, 0.6])


def _default_r() -> np.ndarray:
    return 0.35 * np.diag([0.7, 0.3])


@dataclass
class MpcConfig:
    hp: int = 6
    Q: np.ndarray = field(default_factory=_default_q)
    R: np.ndarray = field(default_factory=_default_r)
    P: np.ndarray | None = None          # terminal weight; Riccati if None
    input_poly: tuple = DEFAULT_INPUT_POLY
    rate_poly: tuple = DEFAULT_RATE_POLY
    terminal_box: tuple = DEFAULT_TERMINAL_BOX
    freeze_scheduling: bool = False      # ablation: hold zeta_k over the horizon
    terminal_cost_absolute: bool = False  # penalize x_Hp'Px_Hp instead of the error
    solver: qpmod.QpSettings = field(default_factory=qpmod.QpSettings)

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        if self.hp < 1:
            raise ValueError("hp must be >= 1")
        for M, name in ((self.Q, "Q"), (self.R, "R")):
            if not np.allclose(M, M.T):
                raise ValueError(f"{name} must be symmetric")
            if np.any(np.linalg.eigvalsh(M) < -1e-12):
                raise ValueError(f"{name} must be positive semidefinite")
        if np.any(np.linalg.eigvalsh(self.R) <= 0.0):
            raise ValueError("R must be positive definite")


def polytope_box(A: np.ndarray, b: np.ndarray, n: int):
    """Per-variable box hull of rows of the form +/- e_i x <= b_i.

    Used by the clipping contract; general rows still enter the QP as-is."""
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    for row, bound in zip(A, b):
        nz = np.flatnonzero(row)
        if nz.size != 1:
            continue
        j = nz[0]
        if row[j] > 0:
            hi[j] = min(hi[j], bound / row[j])
        else:
            lo[j] = max(lo[j], bound / row[j])
    return lo, hi


@dataclass
class SchedulingTrajectory:
    zeta: np.ndarray          # (Hp, 5) clamped scheduling guesses
    clamped: np.ndarray       # (Hp,) bool per step
    shifted_states: np.ndarray  # (Hp+1, 3) shift-and-pad state guess


@dataclass
class MpcSolution:
    dU: np.ndarray            # (Hp, 2) input increments
    U: np.ndarray             # (Hp, 2) inputs, U[i] = U[i-1] + dU[i]
    X_pred: np.ndarray        # (Hp+1, 3) predicted states
    objective: float
    solve_time: float
    status: str
    sched_clamped: bool = False
    qp_solution: qpmod.QpSolution | None = field(repr=False, default=None)


def shift_and_pad(prev: MpcSolution):
    """Advance the previous prediction one step, repeating the tail entry."""
    states = np.vstack([prev.X_pred[1:], prev.X_pred[-1]])
    inputs = np.vstack([prev.U[1:], prev.U[-1]])
    return states, inputs


def predict_scheduling(prev: MpcSolution | None, refs: np.ndarray,
                       x_hat, u_prev, model: TSModel, hp: int,
                       freeze: bool = False) -> SchedulingTrajectory:
    """Scheduling guess over the horizon.

    First tick (no previous solution): planner references with vy = 0 and
    the last input held. Otherwise the previous optimal prediction shifted
    one step. Entry 0 is always overwritten with the fresh (x_hat, u_prev).
    """
    refs = np.asarray(refs, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    u_prev = np.asarray(u_prev, dtype=float)
    if refs.shape[0] < hp + 1:
        raise ValueError("reference window must have hp+1 rows")

    if freeze or prev is None:
        if freeze:
            states = np.tile(x_hat, (hp + 1, 1))
        else:
            states = refs[:hp + 1].copy()
        inputs = np.tile(u_prev, (hp, 1))
    else:
        states, inputs = shift_and_pad(prev)

    states = states.copy()
    inputs = inputs.copy()
    states[0] = x_hat
    inputs[0] = u_prev

    zeta = np.empty((hp, 5))
    clamped = np.zeros(hp, dtype=bool)
    for i in range(hp):
        z, flag = model.domain.clamp(np.concatenate([states[i], inputs[i]]))
        zeta[i] = z
        clamped[i] = flag
    return SchedulingTrajectory(zeta, clamped, states)


def terminal_ingredients(model: TSModel, cfg: MpcConfig):
    """Terminal weight from the Riccati recursion at the domain-center model
    plus the state box reused as the terminal set.

    This substitutes the original invariant-set design; it keeps the QP
    convex and bounds the terminal state inside the learned validity region.
    """
    A, B, _ = instantiate(model.domain.center, model)
    P = riccati_fixed_point(A, B, cfg.Q, cfg.R)
    if P is None:
        warnings.warn("Riccati recursion diverged; falling back to P = 10 Q",
                      stacklevel=2)
        P = 10.0 * cfg.Q
    return P, cfg.terminal_box


def riccati_fixed_point(A, B, Q, R, tol: float = 1e-10,
                        max_iter: int = 100000):
    """Iterate P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA to a fixed point.

    Returns None on divergence."""
    A, B, Q, R = (np.asarray(M, dtype=float) for M in (A, B, Q, R))
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        gain = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ A - A.T @ P @ B @ gain
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)) or np.max(np.abs(P_next)) > 1e12:
            return None
        if np.max(np.abs(P_next - P)) < tol:
            return P_next
        P = P_next
    return None


@dataclass
class _QpData:
    qp: qpmod.QpProblem
    x_free: np.ndarray    # (Hp+1, 3) zero-increment prediction
    S: np.ndarray         # (Hp+1, 3, 2Hp) increment-to-state sensitivities
    const: float          # cost terms independent of the increments


def build_qp(model: TSModel, x_hat, u_prev, refs, sched: SchedulingTrajectory,
             cfg: MpcConfig) -> _QpData:
    """Condensed QP over the stacked input increments.

    Predicted states are eliminated by forward substitution through the
    time-varying instantiated matrices; inputs map to increments through a
    cumulative sum from the last applied input."""
    hp = cfg.hp
    x_hat = np.asarray(x_hat, dtype=float)
    u_prev = np.asarray(u_prev, dtype=float)
    refs = np.asarray(refs, dtype=float)
    nu = 2
    ndec = nu * hp

    P = cfg.P
    if P is None:
        P, _ = terminal_ingredients(model, cfg)

    As = np.empty((hp, 3, 3))
    Bs = np.empty((hp, 3, 2))
    Cs = np.empty((hp, 3))
    for i in range(hp):
        As[i], Bs[i], Cs[i] = instantiate(sched.zeta[i], model)

    # cumulative-sum map: u_i = u_prev + sum_{j<=i} du_j
    Tmap = np.zeros((hp, nu, ndec))
    for i in range(hp):
        for j in range(i + 1):
            Tmap[i, :, nu * j:nu * (j + 1)] = np.eye(nu)

    x_free = np.empty((hp + 1, 3))
    S = np.zeros((hp + 1, 3, ndec))
    x_free[0] = x_hat
    for i in range(hp):
        x_free[i + 1] = As[i] @ x_free[i] + Bs[i] @ u_prev + Cs[i]
        S[i + 1] = As[i] @ S[i] + Bs[i] @ Tmap[i]

    H = np.zeros((ndec, ndec))
    f = np.zeros(ndec)
    const = 0.0
    for i in range(hp):
        d = x_free[i] - refs[i]
        H += 2.0 * S[i].T @ cfg.Q @ S[i]
        f += 2.0 * S[i].T @ cfg.Q @ d
        const += d @ cfg.Q @ d
    d_term = x_free[hp] - (0.0 if cfg.terminal_cost_absolute else refs[hp])
    H += 2.0 * S[hp].T @ P @ S[hp]
    f += 2.0 * S[hp].T @ P @ d_term
    const += d_term @ P @ d_term
    for i in range(hp):
        H[nu * i:nu * (i + 1), nu * i:nu * (i + 1)] += 2.0 * cfg.R

    A_du, b_du = cfg.rate_poly
    A_u, b_u = cfg.input_poly
    rows = []
    rhs = []
    for i in range(hp):
        blk = np.zeros((A_du.shape[0], ndec))
        blk[:, nu * i:nu * (i + 1)] = A_du
        rows.append(blk)
        rhs.append(np.asarray(b_du, dtype=float))
    for i in range(hp):
        rows.append(np.asarray(A_u) @ Tmap[i])
        rhs.append(np.asarray(b_u, dtype=float) - np.asarray(A_u) @ u_prev)
    lo, hi = cfg.terminal_box
    rows.append(S[hp])
    rhs.append(np.asarray(hi, dtype=float) - x_free[hp])
    rows.append(-S[hp])
    rhs.append(x_free[hp] - np.asarray(lo, dtype=float))

    problem = qpmod.QpProblem(H, f, A_in=np.vstack(rows),
                              b_in=np.concatenate(rhs))
    return _QpData(problem, x_free, S, const)


def project_input_sequence(dU, u_prev, cfg: MpcConfig):
    """Sequentially clip increments to the rate box and inputs to the input
    box, preserving the chain U[i] = U[i-1] + dU[i] exactly."""
    rate_lo, rate_hi = polytope_box(*cfg.rate_poly, 2)
    in_lo, in_hi = polytope_box(*cfg.input_poly, 2)
    dU = np.asarray(dU, dtype=float).copy()
    U = np.empty_like(dU)
    u = np.asarray(u_prev, dtype=float).copy()
    for i in range(dU.shape[0]):
        du = np.clip(dU[i], rate_lo, rate_hi)
        u_new = np.clip(u + du, in_lo, in_hi)
        dU[i] = u_new - u
        U[i] = u_new
        u = u_new
    return dU, U


def _shift_duals(y: np.ndarray, cfg: MpcConfig) -> np.ndarray:
    """Advance the stacked multipliers one step along the horizon so they
    stay aligned with the shifted plan (rate blocks, then input blocks,
    then the terminal rows)."""
    m_du = cfg.rate_poly[1].size
    m_u = cfg.input_poly[1].size
    expected = cfg.hp * (m_du + m_u) + 6
    if y.size != expected:
        return y

    def _shift_blocks(blocks, width):
        mat = blocks.reshape(cfg.hp, width)
        return np.vstack([mat[1:], mat[-1:]]).ravel()

    rate = _shift_blocks(y[:cfg.hp * m_du], m_du)
    inp = _shift_blocks(y[cfg.hp * m_du:cfg.hp * (m_du + m_u)], m_u)
    return np.concatenate([rate, inp, y[cfg.hp * (m_du + m_u):]])


def solve_mpc(model: TSModel, x_hat, u_prev, refs,
              prev: MpcSolution | None, cfg: MpcConfig,
              solver: qpmod.QpSolver | None = None) -> MpcSolution:
    """One receding-horizon step; never raises on solver trouble.

    On QP failure the previous plan shifted one step (clipped to the input
    box) is returned with a degraded status."""
    t0 = time.perf_counter()
    solver = solver or qpmod.QpSolver(cfg.solver)
    u_prev = np.asarray(u_prev, dtype=float)

    sched = predict_scheduling(prev, refs, x_hat, u_prev, model, cfg.hp,
                               freeze=cfg.freeze_scheduling)
    data = build_qp(model, x_hat, u_prev, refs, sched, cfg)

    warm = None
    if prev is not None and prev.qp_solution is not None \
            and prev.qp_solution.y_stacked is not None:
        guess = np.vstack([prev.dU[1:], np.zeros((1, 2))]).ravel()
        y_shift = _shift_duals(prev.qp_solution.y_stacked, cfg)
        warm = qpmod.QpSolution(
            x=guess, objective=0.0, status=prev.qp_solution.status,
            iterations=0, kkt_residuals=prev.qp_solution.kkt_residuals,
            duals=prev.qp_solution.duals,
            y_stacked=y_shift, z_stacked=prev.qp_solution.z_stacked)

    sol = solver.solve(data.qp, warm_start=warm)

    if sol.status == qpmod.OPTIMAL:
        dU = sol.x.reshape(cfg.hp, 2)
        dU, U = project_input_sequence(dU, u_prev, cfg)
        X_pred = data.x_free + np.einsum("sij,j->si", data.S, dU.ravel())
        objective = data.qp.objective(dU.ravel()) + data.const
        status = qpmod.OPTIMAL
    else:
        base = prev.U[1] if prev is not None else u_prev
        dU, U = project_input_sequence(
            np.vstack([[base - u_prev], np.zeros((cfg.hp - 1, 2))]), u_prev, cfg)
        X_pred = data.x_free + np.einsum("sij,j->si", data.S, dU.ravel())
        objective = data.qp.objective(dU.ravel()) + data.const
        status = sol.status

    return MpcSolution(dU=dU, U=U, X_pred=X_pred, objective=float(objective),
                       solve_time=time.perf_counter() - t0, status=status,
                       sched_clamped=bool(sched.clamped.any()),
                       qp_solution=sol)

"""Moving-horizon estimation on the learned TS model.

Reconstructs the unmeasurable lateral velocity (and filters the measured
vx, omega) by fitting a state trajectory to a sliding window of past
measurements and applied inputs, subject to the model dynamics with an
additive process-noise decision variable and the state validity box.
"""
from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import qp as qpmod
from .tsmodel import TSModel, instantiate


def _default_q() -> np.ndarray:
    return 0.5 * np.diag([0.25, 0.5, 0.25])


def _default_r() -> np.ndarray:
    return 0.5 * np.diag([0.5, 0.5])


def _default_c() -> np.ndarray:
    # vx and omega are measured; vy is not
    return np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class MheConfig:
    hp: int = 10
    Q: np.ndarray = field(default_factory=_default_q)   # process-noise weight
    R: np.ndarray = field(default_factory=_default_r)   # measurement-residual weight
    C: np.ndarray = field(default_factory=_default_c)
    state_lower: np.ndarray = field(
        default_factory=lambda: np.array([0.1, -0.12, -1.96]))
    state_upper: np.ndarray = field(
        default_factory=lambda: np.array([2.7, 0.12, 1.96]))
    solver: qpmod.QpSettings = field(default_factory=qpmod.QpSettings)

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.C = np.asarray(self.C, dtype=float)
        self.state_lower = np.asarray(self.state_lower, dtype=float)
        self.state_upper = np.asarray(self.state_upper, dtype=float)
        if self.hp < 1:
            raise ValueError("hp must be >= 1")
        for M, name in ((self.Q, "Q"), (self.R, "R")):
            if np.any(np.linalg.eigvalsh(M) <= 0.0):
                raise ValueError(f"{name} must be positive definite")


class MeasurementBuffer:
    """Chronological ring of (measurement, applied input) pairs.

    Pair j holds the measurement of the state at step j together with the
    input that drove step j to j+1."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items = deque(maxlen=capacity)

    def push(self, y, u) -> None:
        self._items.append((np.asarray(y, dtype=float).copy(),
                            np.asarray(u, dtype=float).copy()))

    def __len__(self) -> int:
        return len(self._items)

    @property
    def full(self) -> bool:
        return len(self._items) == self.capacity

    def measurements(self) -> np.ndarray:
        return np.array([y for y, _ in self._items])

    def inputs(self) -> np.ndarray:
        return np.array([u for _, u in self._items])


def push(buffer: MeasurementBuffer, y, u) -> MeasurementBuffer:
    buffer.push(y, u)
    return buffer


@dataclass
class MheSolution:
    X_hat: np.ndarray        # (N+1, 3) stacked state estimates, newest last
    w_hat: np.ndarray        # (N, 3) process residuals
    s_hat: np.ndarray        # (N, 2) measurement residuals y - C x_hat
    objective: float
    solve_time: float
    status: str
    sched_clamped: bool = False
    qp_solution: qpmod.QpSolution | None = field(repr=False, default=None)


@dataclass
class _QpData:
    qp: qpmod.QpProblem
    n_states: int
    const: float
    clamped: bool = False


def build_qp(model: TSModel, buffer: MeasurementBuffer, cfg: MheConfig,
             vy_guess=None) -> _QpData:
    """Window QP over stacked states and process noises.

    The measurement residual is eliminated by substitution into the cost;
    dynamics enter as equality constraints with the scheduling vector built
    from measured vx/omega, the previous window's vy estimates (zero before
    any solve) and the logged inputs."""
    N = len(buffer)
    if N == 0:
        raise ValueError("buffer is empty")
    Y = buffer.measurements()
    U = buffer.inputs()
    if vy_guess is None:
        vy_guess = np.zeros(N)
    vy_guess = np.asarray(vy_guess, dtype=float)

    nx = 3
    n_states = nx * (N + 1)
    ndec = n_states + nx * N

    clamped = False
    A_eq = np.zeros((nx * N, ndec))
    b_eq = np.zeros(nx * N)
    for i in range(N):
        zeta_raw = np.array([Y[i, 0], vy_guess[i], Y[i, 1], U[i, 0], U[i, 1]])
        zeta, flag = model.domain.clamp(zeta_raw)
        clamped |= flag
        Ai, Bi, Ci = instantiate(zeta, model)
        r = slice(nx * i, nx * (i + 1))
        A_eq[r, nx * (i + 1):nx * (i + 2)] = np.eye(nx)
        A_eq[r, nx * i:nx * (i + 1)] = -Ai
        A_eq[r, n_states + nx * i:n_states + nx * (i + 1)] = -np.eye(nx)
        b_eq[r] = Bi @ U[i] + Ci

    H = np.zeros((ndec, ndec))
    f = np.zeros(ndec)
    const = 0.0
    CtRC = cfg.C.T @ cfg.R @ cfg.C
    for i in range(N):
        r = slice(nx * i, nx * (i + 1))
        H[r, r] += 2.0 * CtRC
        f[r.start:r.stop] += -2.0 * cfg.C.T @ cfg.R @ Y[i]
        const += Y[i] @ cfg.R @ Y[i]
        rw = slice(n_states + nx * i, n_states + nx * (i + 1))
        H[rw, rw] += 2.0 * cfg.Q

    lb = np.concatenate([np.tile(cfg.state_lower, N + 1),
                         np.full(nx * N, -np.inf)])
    ub = np.concatenate([np.tile(cfg.state_upper, N + 1),
                         np.full(nx * N, np.inf)])

    problem = qpmod.QpProblem(H, f, A_eq=A_eq, b_eq=b_eq, lb=lb, ub=ub)
    return _QpData(problem, n_states, const, clamped)


class MovingHorizonEstimator:
    """Owns the measurement window, the previous-window lateral-velocity
    guess and the warm-start state; one instance per control loop."""

    def __init__(self, model: TSModel, cfg: MheConfig):
        self.model = model
        self.cfg = cfg
        self.buffer = MeasurementBuffer(cfg.hp)
        self.solver = qpmod.QpSolver(cfg.solver)
        self._vy_window = np.zeros(0)
        self._last_qp = None
        self._last_ndec = -1
        self._last_vy = 0.0

    def push(self, y, u) -> None:
        self.buffer.push(y, u)

    def estimate(self, y_now) -> tuple[np.ndarray, MheSolution | None]:
        """Current-state estimate; `y_now` backs the fallback path only.

        With an empty window returns (y_vx, 0, y_omega) directly."""
        t0 = time.perf_counter()
        y_now = np.asarray(y_now, dtype=float)
        if len(self.buffer) == 0:
            x_hat = np.array([y_now[0], self._last_vy, y_now[1]])
            return x_hat, None
        x_hat, sol = solve_mhe(self.model, self.buffer, self.cfg,
                               warm=self._warm(), solver=self.solver,
                               vy_guess=self._vy_window_guess(),
                               fallback_y=y_now, fallback_vy=self._last_vy)
        sol.solve_time = time.perf_counter() - t0
        if sol.status == qpmod.OPTIMAL:
            self._vy_window = sol.X_hat[:, 1].copy()
            self._last_qp = sol.qp_solution
            self._last_ndec = sol.qp_solution.x.size
        self._last_vy = float(x_hat[1])
        return x_hat, sol

    def _vy_window_guess(self) -> np.ndarray:
        # the previous stacked estimates end exactly at the newest pair's
        # time, so aligning by the window end needs no shift
        N = len(self.buffer)
        w = self._vy_window
        if w.size >= N:
            return w[-N:].copy()
        return np.concatenate([np.zeros(N - w.size), w])

    def _warm(self):
        return self._last_qp

    def reset(self) -> None:
        self.buffer = MeasurementBuffer(self.cfg.hp)
        self._vy_window = np.zeros(0)
        self._last_qp = None
        self._last_vy = 0.0


def solve_mhe(model: TSModel, buffer: MeasurementBuffer, cfg: MheConfig,
              warm=None, solver: qpmod.QpSolver | None = None,
              vy_guess=None, fallback_y=None, fallback_vy: float = 0.0
              ) -> tuple[np.ndarray, MheSolution]:
    """Solve the window problem; the newest stacked state is the estimate.

    Shorter-than-capacity windows shrink the horizon (startup). On QP
    failure the estimate degrades to (y_vx, previous vy, y_omega)."""
    t0 = time.perf_counter()
    if len(buffer) == 0:
        raise ValueError("buffer is empty")
    solver = solver or qpmod.QpSolver(cfg.solver)
    data = build_qp(model, buffer, cfg, vy_guess=vy_guess)
    N = len(buffer)

    warm_sol = warm if (warm is not None
                        and warm.x.size == data.qp.n) else None
    sol = solver.solve(data.qp, warm_start=warm_sol)

    Y = buffer.measurements()
    if sol.status == qpmod.OPTIMAL:
        X_hat = sol.x[:data.n_states].reshape(N + 1, 3)
        w_hat = sol.x[data.n_states:].reshape(N, 3)
        x_cur = X_hat[-1]
    else:
        y_last = Y[-1] if fallback_y is None else np.asarray(fallback_y)
        x_cur = np.array([y_last[0], fallback_vy, y_last[1]])
        X_hat = np.tile(x_cur, (N + 1, 1))
        w_hat = np.zeros((N, 3))
    s_hat = Y - X_hat[:-1] @ cfg.C.T

    result = MheSolution(
        X_hat=X_hat, w_hat=w_hat, s_hat=s_hat,
        objective=float(data.qp.objective(sol.x) + data.const),
        solve_time=time.perf_counter() - t0, status=sol.status,
        sched_clamped=data.clamped,
        qp_solution=sol)
    return x_cur, result

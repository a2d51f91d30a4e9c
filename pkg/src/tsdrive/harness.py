"""Closed-loop runner wiring planner -> estimator -> controller -> plant at
the fixed sampling rate, with per-step logging, metrics and export."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import qp as qpmod
from .mhe import MheConfig, MovingHorizonEstimator
from .mpc import MpcConfig, MpcSolution, polytope_box, solve_mpc, terminal_ingredients
from .references import ReferenceProfile, reference_window
from .tsmodel import TSModel
from .vehicle import (ControlInput, DynamicState, NoiseSpec, VehicleParams,
                      VxDomainError, measure, step)

RUNLOG_COLUMNS = [
    "k", "t",
    "vx_ref", "vy_ref", "omega_ref",
    "vx_true", "vy_true", "omega_true",
    "vx_est", "vy_est", "omega_est",
    "y_vx", "y_omega",
    "delta", "a", "d_delta", "d_a",
    "mpc_status", "mhe_status",
    "mpc_solve_time", "mhe_solve_time",
    "mpc_clamped", "mhe_clamped",
]
TIMING_COLUMNS = ("mpc_solve_time", "mhe_solve_time")


class RunAbort(RuntimeError):
    """The plant left its valid domain mid-run."""


@dataclass
class RunConfig:
    model: TSModel
    profile: ReferenceProfile
    duration: float = 120.0
    seed: int = 0
    initial_state: tuple = (1.0, 0.0, 0.0)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    mhe: MheConfig = field(default_factory=MheConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    # when set, the input computed at step k is applied at step k+1
    delay_one_step: bool = False

    @property
    def dt(self) -> float:
        return self.model.dt


class RunLog:
    """Column-wise per-step record of one closed-loop run."""

    def __init__(self):
        self.rows: list[list] = []
        self.aborted: str | None = None

    def append(self, row: list) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        idx = RUNLOG_COLUMNS.index(name)
        vals = [r[idx] for r in self.rows]
        if name.endswith("status"):
            return np.array(vals, dtype=object)
        return np.array(vals, dtype=float)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RUNLOG_COLUMNS)
            for row in self.rows:
                w.writerow([v if isinstance(v, str) else repr(float(v))
                            if isinstance(v, float) else v for v in row])

    @staticmethod
    def from_csv(path) -> "RunLog":
        log = RunLog()
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            if header != RUNLOG_COLUMNS:
                raise ValueError(f"unexpected runlog header: {header}")
            status_idx = {RUNLOG_COLUMNS.index("mpc_status"),
                          RUNLOG_COLUMNS.index("mhe_status")}
            for raw in r:
                row = [v if i in status_idx else float(v)
                       for i, v in enumerate(raw)]
                row[0] = int(row[0])
                log.append(row)
        return log


def run_closed_loop(cfg: RunConfig) -> RunLog:
    """One deterministic closed-loop run.

    Per step: planner references, window estimate, receding-horizon solve,
    plant advance, measurement. Solver trouble degrades per the fallback
    contracts; only the plant leaving its domain aborts the run."""
    model = cfg.model
    dt = cfg.dt
    n_steps = int(round(cfg.duration / dt))
    if cfg.mpc.P is None:
        cfg.mpc.P, _ = terminal_ingredients(model, cfg.mpc)

    estimator = MovingHorizonEstimator(model, cfg.mhe)
    mpc_solver = qpmod.QpSolver(cfg.mpc.solver)
    stream = cfg.noise.stream()

    state = DynamicState(*cfg.initial_state)
    y = measure(state, stream)
    u_prev = np.zeros(2)
    pending_u = np.zeros(2)
    prev_sol: MpcSolution | None = None
    log = RunLog()

    for k in range(n_steps):
        t = k * dt
        refs = reference_window(cfg.profile, t, cfg.mpc.hp, dt)

        t0 = time.perf_counter()
        x_hat, mhe_sol = estimator.estimate(np.asarray(y))
        mhe_time = time.perf_counter() - t0
        mhe_status = mhe_sol.status if mhe_sol is not None else "startup"
        mhe_clamped = mhe_sol.sched_clamped if mhe_sol is not None else False

        sol = solve_mpc(model, x_hat, u_prev, refs, prev_sol, cfg.mpc,
                        solver=mpc_solver)
        u = pending_u if cfg.delay_one_step else sol.U[0]
        pending_u = sol.U[0]

        estimator.push(y, u)
        x_true = state.as_array()
        try:
            state = step(state, ControlInput(u[0], u[1]), cfg.vehicle, dt)
        except VxDomainError as exc:
            log.aborted = f"step {k}: {exc}"
            log.append([
                k, t, *refs[0], *x_true, *x_hat, *y, *u, *(u - u_prev),
                sol.status, mhe_status, sol.solve_time, mhe_time,
                int(sol.sched_clamped), int(mhe_clamped)])
            raise RunAbort(log.aborted)

        log.append([
            k, t, *refs[0], *x_true, *x_hat, *y, *u, *(u - u_prev),
            sol.status, mhe_status, sol.solve_time, mhe_time,
            int(sol.sched_clamped), int(mhe_clamped)])

        y = measure(state, stream)
        u_prev = u
        prev_sol = sol

    return log


def compute_metrics(log: RunLog, mpc_cfg: MpcConfig | None = None) -> dict:
    """Tracking and estimation RMSE, constraint-violation counts and
    solve-time statistics."""
    if len(log) == 0:
        raise ValueError("empty run log")
    mpc_cfg = mpc_cfg or MpcConfig()

    refs = np.stack([log.column("vx_ref"), log.column("vy_ref"),
                     log.column("omega_ref")], axis=1)
    truth = np.stack([log.column("vx_true"), log.column("vy_true"),
                      log.column("omega_true")], axis=1)
    est = np.stack([log.column("vx_est"), log.column("vy_est"),
                    log.column("omega_est")], axis=1)
    u = np.stack([log.column("delta"), log.column("a")], axis=1)
    du = np.stack([log.column("d_delta"), log.column("d_a")], axis=1)

    tol = 1e-9
    in_lo, in_hi = polytope_box(*mpc_cfg.input_poly, 2)
    rate_lo, rate_hi = polytope_box(*mpc_cfg.rate_poly, 2)
    input_viol = int(np.sum(np.any((u < in_lo - tol) | (u > in_hi + tol),
                                   axis=1)))
    rate_viol = int(np.sum(np.any((du < rate_lo - tol) | (du > rate_hi + tol),
                                  axis=1)))

    def _stats(v: np.ndarray) -> dict:
        return {"mean": float(np.mean(v)), "median": float(np.median(v)),
                "p95": float(np.percentile(v, 95)), "max": float(np.max(v))}

    track_err = truth - refs
    return {
        "steps": len(log),
        "tracking_rmse": {
            "vx": float(np.sqrt(np.mean(track_err[:, 0] ** 2))),
            "vy": float(np.sqrt(np.mean(track_err[:, 1] ** 2))),
            "omega": float(np.sqrt(np.mean(track_err[:, 2] ** 2))),
        },
        "estimation_rmse": {
            "vx": float(np.sqrt(np.mean((est[:, 0] - truth[:, 0]) ** 2))),
            "vy": float(np.sqrt(np.mean((est[:, 1] - truth[:, 1]) ** 2))),
            "omega": float(np.sqrt(np.mean((est[:, 2] - truth[:, 2]) ** 2))),
        },
        "input_violations": input_viol,
        "rate_violations": rate_viol,
        "mpc_degraded_steps": int(np.sum(log.column("mpc_status") != "optimal")),
        "solve_time_mpc": _stats(log.column("mpc_solve_time")),
        "solve_time_mhe": _stats(log.column("mhe_solve_time")),
        "aborted": log.aborted,
    }


def export(log: RunLog, path, fmt: str = "csv") -> None:
    """Lossless per-step export; CSV column order is RUNLOG_COLUMNS."""
    try:
        if fmt == "csv":
            log.to_csv(path)
        elif fmt == "json":
            with open(path, "w") as fh:
                json.dump({"columns": RUNLOG_COLUMNS,
                           "rows": [[v for v in row] for row in log.rows],
                           "aborted": log.aborted}, fh)
        else:
            raise ValueError(f"unknown export format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write run log to {path}: {exc}") from exc

"""Offline neuro-fuzzy identification of the vehicle model.

The three-state plant is split into three MISO regression problems, one per
state component, each fitted by hybrid learning: recursive least squares on
the rule consequents (linear parameters) alternating with gradient descent
on the bell membership parameters (nonlinear premises). The learned model is
discrete at the excitation sampling time.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .tsmodel import (SCHEDULING_NAMES, SchedulingDomain, TSModel, TSSubModel,
                      lexicographic_rule_grid)
from .vehicle import (ControlInput, DynamicState, NoiseSpec, VehicleParams,
                      VxDomainError, measure, step)

DATASET_HEADER = ["k", "vx", "vy", "omega", "delta", "a",
                  "vx_next", "vy_next", "omega_next"]


class TrainingDivergenceError(RuntimeError):
    """Training SSE blew up past the divergence guard."""


@dataclass(frozen=True)
class LearnConfig:
    n_mf: int = 2
    epochs: int = 10
    premise_step: float = 1e-3       # relative to per-parameter scale
    validation_fraction: float = 0.2  # tail-of-trajectory split
    seed: int = 0
    b_bounds: tuple[float, float] = (0.5, 8.0)
    max_halvings: int = 6

    def __post_init__(self):
        if self.n_mf < 2:
            raise ValueError("n_mf must be >= 2")
        if not 0.0 < self.validation_fraction < 0.5:
            raise ValueError("validation_fraction must be in (0, 0.5)")


class Dataset:
    """Excitation samples: scheduling vectors Z[k] paired with the next
    state Y[k]; the scheduling domain is the observed per-variable range."""

    def __init__(self, Z, Y, dt: float, meta: dict | None = None):
        self.Z = np.asarray(Z, dtype=float)
        self.Y = np.asarray(Y, dtype=float)
        self.dt = float(dt)
        self.meta = dict(meta or {})
        if self.Z.ndim != 2 or self.Z.shape[1] != len(SCHEDULING_NAMES):
            raise ValueError("Z must be (N, 5)")
        if self.Y.shape != (self.Z.shape[0], 3):
            raise ValueError("Y must be (N, 3)")
        if len(self) == 0:
            raise ValueError("dataset is empty")

    def __len__(self) -> int:
        return self.Z.shape[0]

    @property
    def domain(self) -> SchedulingDomain:
        return SchedulingDomain(self.Z.min(axis=0), self.Z.max(axis=0))

    def split_tail(self, fraction: float):
        """Chronological split: head for training, tail for validation."""
        n_val = max(1, int(round(fraction * len(self))))
        n_tr = len(self) - n_val
        if n_tr < 1:
            raise ValueError("dataset too small to split")
        return (Dataset(self.Z[:n_tr], self.Y[:n_tr], self.dt, self.meta),
                Dataset(self.Z[n_tr:], self.Y[n_tr:], self.dt, self.meta))

    def save_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(DATASET_HEADER)
            for k in range(len(self)):
                w.writerow([k] + [repr(float(v)) for v in self.Z[k]]
                           + [repr(float(v)) for v in self.Y[k]])

    @staticmethod
    def load_csv(path, dt: float) -> "Dataset":
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            if header != DATASET_HEADER:
                raise ValueError(f"unexpected dataset header: {header}")
            rows = [[float(v) for v in row[1:]] for row in r]
        arr = np.asarray(rows)
        return Dataset(arr[:, :5], arr[:, 5:], dt)


# --------------------------------------------------------------------------
# excitation-data generation
# --------------------------------------------------------------------------

VX_RANGE = (0.1, 2.7)
DELTA_MAX = 0.249
A_RANGE = (-1.0, 4.0)
_VX_GUARD = (0.12, 2.72)  # resample accelerations before hitting the floor


def _steering_profile(rng: np.random.Generator, n: int, dt: float) -> np.ndarray:
    """Amplitude-varying sine sweeps with occasional held offsets."""
    delta = np.empty(n)
    k = 0
    while k < n:
        seg = min(n - k, int(rng.uniform(2.0, 4.0) / dt))
        if rng.uniform() < 0.2:
            delta[k:k + seg] = rng.uniform(-0.22, 0.22)
        else:
            amp = rng.uniform(0.05, DELTA_MAX)
            freq = rng.uniform(0.2, 1.2)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            t = np.arange(seg) * dt
            delta[k:k + seg] = amp * np.sin(2.0 * np.pi * freq * t + phase)
        k += seg
    return np.clip(delta, -DELTA_MAX, DELTA_MAX)


def generate_excitation(params: VehicleParams, noise: NoiseSpec,
                        duration: float, seed: int, dt: float = 1.0 / 30.0,
                        noisy_targets: bool = False) -> Dataset:
    """Closed run of the plant under a rich excitation policy.

    Steering follows chirp-like sweeps; acceleration alternates between
    velocity-seeking segments and raw steps over the commanded range.
    Accelerations that would push vx outside its guard band are resampled
    (counted in meta)."""
    if duration <= 0.0:
        raise ValueError("duration must be > 0")
    n = int(round(duration / dt))
    rng = np.random.default_rng(seed)
    stream = noise.stream()

    delta = _steering_profile(rng, n, dt)
    state = DynamicState(1.0, 0.0, 0.0)
    Z = np.empty((n, 5))
    Y = np.empty((n, 3))
    resampled = 0

    seg_left = 0
    seek_target = None
    a_held = 0.0
    for k in range(n):
        if seg_left == 0:
            seg_left = max(1, int(rng.uniform(0.8, 2.0) / dt))
            if rng.uniform() < 0.5:
                seek_target = rng.uniform(0.2, 2.65)
            else:
                seek_target = None
                a_held = rng.uniform(*A_RANGE)
        seg_left -= 1

        if seek_target is not None:
            a = 2.0 * (seek_target - state.vx) + rng.uniform(-0.3, 0.3)
        else:
            a = a_held
        a = float(np.clip(a, *A_RANGE))

        # stability governor: taper steering at low speed and straighten out
        # during incipient spins, else slip saturation drives vx to the floor
        d_cmd = float(delta[k])
        if state.vx < 0.5:
            d_cmd *= state.vx / 0.5
        if abs(state.omega) > 1.9 or abs(state.vy) > 0.14:
            d_cmd = 0.0

        # keep vx inside the guard band; resample toward the interior
        vx_pred = state.vx + a * dt
        while vx_pred < _VX_GUARD[0] or vx_pred > _VX_GUARD[1]:
            resampled += 1
            a = rng.uniform(0.6, 2.0) if vx_pred < _VX_GUARD[0] \
                else rng.uniform(-1.0, -0.2)
            a = float(np.clip(a, *A_RANGE))
            vx_pred = state.vx + a * dt
            seek_target, a_held = None, a

        inp = ControlInput(d_cmd, a)
        nxt = None
        for d_try, a_try in ((d_cmd, a), (0.5 * d_cmd, max(a, 2.0)),
                             (0.0, 3.0), (0.0, 4.0)):
            try:
                inp = ControlInput(d_try, a_try)
                nxt = step(state, inp, params, dt)
                break
            except VxDomainError:
                resampled += 1
        if nxt is None:
            raise VxDomainError("excitation could not keep vx above the floor")

        Z[k] = (state.vx, state.vy, state.omega, inp.delta, inp.a)
        Y[k] = nxt.as_array()
        if noisy_targets:
            y_vx, y_om = measure(nxt, stream)
            Y[k, 0], Y[k, 2] = y_vx, y_om
        state = nxt

    meta = {"seed": seed, "duration": duration, "resampled": resampled,
            "noisy_targets": noisy_targets}
    return Dataset(Z, Y, dt, meta)


def split_miso(ds: Dataset):
    """One (Z, y) regression set per state component."""
    return [(ds.Z, ds.Y[:, j]) for j in range(ds.Y.shape[1])]


# --------------------------------------------------------------------------
# premise initialization and the consequent / premise estimators
# --------------------------------------------------------------------------

def init_premises(domain: SchedulingDomain, n_mf: int = 2):
    """Grid initialization: centers equally spaced across each interval,
    half-widths so adjacent functions cross near degree 0.5, shape b = 2."""
    span = domain.span
    if np.any(span <= 0.0):
        bad = [domain.names[i] for i in np.flatnonzero(span <= 0.0)]
        raise ValueError(f"zero-width domain interval for {bad}")
    n_in = domain.size
    mf_c = np.linspace(domain.lower, domain.upper, n_mf, axis=1)
    mf_a = np.repeat((span / (2.0 * (n_mf - 1)))[:, None], n_mf, axis=1)
    mf_b = np.full((n_in, n_mf), 2.0)
    return mf_a, mf_b, mf_c


def _phi_matrix(sub: TSSubModel, Z: np.ndarray) -> np.ndarray:
    """Regression matrix: row k concatenates mu_N_i(Z_k) * [Z_k, 1] over rules."""
    mu_n = sub.normalized_firing_batch(Z)
    X1 = np.hstack([Z, np.ones((Z.shape[0], 1))])
    return (mu_n[:, :, None] * X1[:, None, :]).reshape(Z.shape[0], -1)


def fit_consequents(Z, y, sub: TSSubModel, ridge: float = 1e-8) -> np.ndarray:
    """Sequential recursive least squares (forgetting factor 1) over all rule
    consequents; equivalent to batch ridge least squares with the RLS prior.

    Warns when the regression is rank deficient (insufficient excitation)."""
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    phi_all = _phi_matrix(sub, Z)
    n_par = phi_all.shape[1]
    if Z.shape[0] < n_par:
        warnings.warn(f"only {Z.shape[0]} samples for {n_par} consequent "
                      "parameters; fit is under-determined", stacklevel=2)

    P = np.eye(n_par) / ridge
    theta = np.zeros(n_par)
    for k in range(Z.shape[0]):
        phi = phi_all[k]
        Pphi = P @ phi
        denom = 1.0 + phi @ Pphi
        K = Pphi / denom
        theta += K * (y[k] - phi @ theta)
        P -= np.outer(K, Pphi)
        P = 0.5 * (P + P.T)

    gram = phi_all.T @ phi_all
    ev = np.linalg.eigvalsh(gram)
    if ev[0] < 1e-10 * max(ev[-1], 1.0):
        warnings.warn("rank-deficient consequent regression; ridge-regularized "
                      "solution returned (insufficient excitation)", stacklevel=2)
    return theta.reshape(sub.n_rules, sub.n_inputs + 1)


def predict_batch(sub: TSSubModel, Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    mu_n = sub.normalized_firing_batch(Z)
    X1 = np.hstack([Z, np.ones((Z.shape[0], 1))])
    return np.einsum("nr,nr->n", mu_n, X1 @ sub.theta.T)


def sse(sub: TSSubModel, Z, y) -> float:
    r = predict_batch(sub, Z) - np.asarray(y, dtype=float)
    return float(r @ r)


def premise_gradient(Z, y, sub: TSSubModel):
    """Analytic gradient of the squared prediction error with respect to all
    bell parameters; returns (d/da, d/db, d/dc), each (n_inputs, n_mf).

    Chains through the normalization, the product firing and the bell
    function; validated against central finite differences in the tests."""
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    deg = sub.membership_batch(Z)                       # (N, n_in, n_mf)
    cols = np.arange(sub.n_inputs)[None, :]
    W = np.prod(deg[:, cols, sub.rule_mf], axis=-1)     # (N, Nv)
    S = W.sum(axis=1)
    X1 = np.hstack([Z, np.ones((Z.shape[0], 1))])
    G = X1 @ sub.theta.T                                # rule outputs
    y_hat = (W * G).sum(axis=1) / S
    err = y - y_hat

    # d y_hat / d w_i = (G_i - y_hat) / S ; aggregated per membership function
    T = W * (G - y_hat[:, None]) / S[:, None]           # (N, Nv)

    ga = np.zeros((sub.n_inputs, sub.n_mf))
    gb = np.zeros_like(ga)
    gc = np.zeros_like(ga)
    for o in range(sub.n_inputs):
        z = Z[:, o]
        for m in range(sub.n_mf):
            mask = sub.rule_mf[:, o] == m
            eta = deg[:, o, m]
            # d y_hat / d eta, using d w_i / d eta = w_i / eta for selected rules
            dyde = T[:, mask].sum(axis=1) / eta
            a, b, c = sub.mf_a[o, m], sub.mf_b[o, m], sub.mf_c[o, m]
            zc = z - c
            abs_zc = np.abs(zc)
            ee = eta * (1.0 - eta)
            deta_da = 2.0 * b * ee / a
            with np.errstate(divide="ignore", invalid="ignore"):
                log_u = np.log(abs_zc / a)
                deta_db = np.where(abs_zc > 0.0, -2.0 * ee * log_u, 0.0)
                deta_dc = np.where(abs_zc > 0.0,
                                   2.0 * b * ee * np.sign(zc) / abs_zc, 0.0)
            common = -2.0 * err * dyde
            ga[o, m] = common @ deta_da
            gb[o, m] = common @ deta_db
            gc[o, m] = common @ deta_dc
    return ga, gb, gc


# --------------------------------------------------------------------------
# hybrid training
# --------------------------------------------------------------------------

@dataclass
class TrainReport:
    target_index: int
    train_sse: list[float] = field(default_factory=list)
    val_rmse: list[float] = field(default_factory=list)
    best_epoch: int = 0
    halvings: int = 0
    final_step: float = 0.0

    def to_dict(self) -> dict:
        return {"target_index": self.target_index,
                "train_sse": self.train_sse,
                "val_rmse": self.val_rmse,
                "best_epoch": self.best_epoch,
                "halvings": self.halvings,
                "final_step": self.final_step}


def _premise_scales(domain: SchedulingDomain, n_mf: int):
    span = domain.span[:, None]
    scale_a = np.repeat(span, n_mf, axis=1)
    scale_b = np.ones_like(scale_a)
    scale_c = np.repeat(span, n_mf, axis=1)
    return scale_a, scale_b, scale_c


def hybrid_train(Z, y, domain: SchedulingDomain, target_index: int,
                 config: LearnConfig) -> tuple[TSSubModel, TrainReport]:
    """Alternate consequent least squares with one premise descent step per
    epoch; step size halves on SSE increase and doubles after three straight
    accepts. Returns the validation-best epoch's model."""
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    n = Z.shape[0]
    n_val = max(1, int(round(config.validation_fraction * n)))
    Z_tr, y_tr = Z[:n - n_val], y[:n - n_val]
    Z_val, y_val = Z[n - n_val:], y[n - n_val:]

    mf_a, mf_b, mf_c = init_premises(domain, config.n_mf)
    sc_a, sc_b, sc_c = _premise_scales(domain, config.n_mf)
    a_floor = 1e-3 * domain.span[:, None]

    def make_sub(a, b, c, theta=None):
        if theta is None:
            theta = np.zeros((config.n_mf ** domain.size, domain.size + 1))
        return TSSubModel(a, b, c, theta, target_index)

    def fitted(a, b, c):
        shell = make_sub(a, b, c)
        theta = fit_consequents(Z_tr, y_tr, shell)
        sub = make_sub(a, b, c, theta)
        return sub, sse(sub, Z_tr, y_tr)

    sub, train_sse = fitted(mf_a, mf_b, mf_c)
    sse0 = train_sse
    # blow-up guard; the absolute floor keeps near-perfect fits from
    # tripping it on rejected micro-steps
    divergence_threshold = 10.0 * sse0 + 1e-3 * (float(y_tr @ y_tr) + 1.0)
    report = TrainReport(target_index=target_index)
    report.train_sse.append(train_sse)
    val_rmse = math.sqrt(sse(sub, Z_val, y_val) / len(y_val))
    report.val_rmse.append(val_rmse)
    best = (sub, val_rmse, 0)

    lr = config.premise_step
    accepts = 0
    for epoch in range(1, config.epochs + 1):
        ga, gb, gc = premise_gradient(Z_tr, y_tr, sub)
        g_scaled = np.concatenate([(ga * sc_a).ravel(), (gb * sc_b).ravel(),
                                   (gc * sc_c).ravel()])
        g_norm = np.linalg.norm(g_scaled) / math.sqrt(g_scaled.size)
        if g_norm == 0.0:
            report.train_sse.append(train_sse)
            report.val_rmse.append(report.val_rmse[-1])
            continue

        # pick the step against the current consequents (cheap), then refit
        # them once; the refit can only lower the error further
        accepted = False
        cand_sse = train_sse
        for _ in range(config.max_halvings + 1):
            na = np.maximum(mf_a - lr * sc_a ** 2 * ga / g_norm, a_floor)
            nb = np.clip(mf_b - lr * sc_b ** 2 * gb / g_norm, *config.b_bounds)
            nc = mf_c - lr * sc_c ** 2 * gc / g_norm
            trial = make_sub(na, nb, nc, sub.theta)
            cand_sse = sse(trial, Z_tr, y_tr)
            if cand_sse <= train_sse:
                accepted = True
                break
            lr *= 0.5
            report.halvings += 1
        if not accepted and cand_sse > divergence_threshold:
            raise TrainingDivergenceError(
                f"SSE {cand_sse:.3e} exceeded the divergence guard "
                f"{divergence_threshold:.3e} at epoch {epoch} "
                f"(target {target_index})")

        if accepted:
            cand, refit_sse = fitted(na, nb, nc)
            if refit_sse <= train_sse:
                mf_a, mf_b, mf_c = na, nb, nc
                sub, train_sse = cand, refit_sse
                accepts += 1
                if accepts >= 3:
                    lr *= 2.0
                    accepts = 0
            else:
                # ridge artifact; reject the epoch to keep monotonicity
                accepts = 0
        else:
            accepts = 0

        report.train_sse.append(train_sse)
        val_rmse = math.sqrt(sse(sub, Z_val, y_val) / len(y_val))
        report.val_rmse.append(val_rmse)
        if val_rmse < best[1]:
            best = (sub, val_rmse, epoch)

    report.best_epoch = best[2]
    report.final_step = lr
    return best[0], report


def train_model(ds: Dataset, config: LearnConfig) -> tuple[TSModel, list[TrainReport]]:
    """Fit the three MISO sub-models independently on a shared domain."""
    domain = ds.domain
    subs = []
    reports = []
    for j, (Z, y) in enumerate(split_miso(ds)):
        sub, rep = hybrid_train(Z, y, domain, j, config)
        subs.append(sub)
        reports.append(rep)
    return TSModel(subs, ds.dt, domain), reports


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ValidationReport:
    rmse: np.ndarray          # per-state one-step RMSE
    max_err: np.ndarray
    n_samples: int
    clamped_fraction: float   # holdout points outside the learned domain
    domain_span: np.ndarray   # per-state span of the learned domain

    @property
    def rmse_fraction_of_span(self) -> np.ndarray:
        return self.rmse / self.domain_span

    def to_dict(self) -> dict:
        return {"rmse": self.rmse.tolist(),
                "max_err": self.max_err.tolist(),
                "n_samples": self.n_samples,
                "clamped_fraction": self.clamped_fraction,
                "domain_span": self.domain_span.tolist(),
                "rmse_fraction_of_span": self.rmse_fraction_of_span.tolist()}


def validate(model: TSModel, holdout: Dataset) -> ValidationReport:
    """One-step-ahead prediction errors over a holdout set."""
    if len(holdout) == 0:
        raise ValueError("empty holdout")
    Z = holdout.Z
    clipped = np.clip(Z, model.domain.lower, model.domain.upper)
    clamped = np.any(clipped != Z, axis=1)
    preds = np.stack([predict_batch(sub, clipped) for sub in model.submodels],
                     axis=1)
    err = preds - holdout.Y
    return ValidationReport(
        rmse=np.sqrt(np.mean(err ** 2, axis=0)),
        max_err=np.max(np.abs(err), axis=0),
        n_samples=len(holdout),
        clamped_fraction=float(np.mean(clamped)),
        domain_span=model.domain.span[:3],
    )

"""Runtime polytopic Takagi-Sugeno model: membership functions, rule firing,
convex blending into discrete-time state-space matrices, one-step prediction,
and JSON persistence.

Rule ordering contract: rules are enumerated lexicographically over the
per-input membership indices with the LAST input varying fastest, i.e. the
order produced by itertools.product(range(n_mf), repeat=n_inputs). The order
is serialized with the model so learned and runtime orderings cannot diverge.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

MODEL_FORMAT_VERSION = "ts-model/1"

SCHEDULING_NAMES = ("vx", "vy", "omega", "delta", "a")
TARGET_NAMES = ("vx", "vy", "omega")


class ModelFormatError(ValueError):
    """Model file is malformed or carries an unknown version tag."""


class DegenerateSchedulingError(ValueError):
    """All rule firing strengths vanished (scheduling far outside domain)."""


@dataclass(frozen=True)
class GBellParams:
    """Generalized bell membership function: 1 / (1 + |(z-c)/a|^(2b))."""

    a: float  # half-width
    b: float  # shape exponent
    c: float  # center

    def __post_init__(self):
        if self.a <= 0.0 or self.b <= 0.0:
            raise ValueError("gbell requires a > 0 and b > 0")


@dataclass(frozen=True)
class Rule:
    """One polytope vertex: membership choice per input plus affine consequent."""

    mf_index: tuple[int, ...]
    consequent: tuple[float, ...]


def gbell(z: float, p: GBellParams) -> float:
    """Membership degree in (0, 1].

    The base uses the absolute normalized distance so non-integer b is well
    defined for z < c. Degrees can underflow to 0.0 only far outside the
    learned domain.
    """
    u = abs((z - p.c) / p.a)
    with np.errstate(over="ignore"):
        t = u ** (2.0 * p.b)
    return float(1.0 / (1.0 + t))


def lexicographic_rule_grid(n_inputs: int, n_mf: int) -> np.ndarray:
    """All membership-index combinations in the serialized rule order."""
    combos = list(itertools.product(range(n_mf), repeat=n_inputs))
    return np.array(combos, dtype=np.intp)


class SchedulingDomain:
    """Per-variable validity intervals of the scheduling vector."""

    def __init__(self, lower, upper, names=SCHEDULING_NAMES):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.names = tuple(names)
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ValueError("domain bounds must be 1-D and same length")
        if len(self.names) != self.lower.size:
            raise ValueError("domain names/bounds length mismatch")
        if np.any(self.lower > self.upper):
            raise ValueError("domain lower bound exceeds upper bound")

    @property
    def size(self) -> int:
        return self.lower.size

    @property
    def span(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, zeta) -> bool:
        z = np.asarray(zeta, dtype=float)
        return bool(np.all(z >= self.lower) and np.all(z <= self.upper))

    def clamp(self, zeta) -> tuple[np.ndarray, bool]:
        """Clip to the interval box; flag reports whether clipping occurred."""
        z = np.asarray(zeta, dtype=float)
        clipped = np.clip(z, self.lower, self.upper)
        return clipped, bool(np.any(clipped != z))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.size))

    def to_dict(self) -> dict:
        return {"names": list(self.names),
                "lower": self.lower.tolist(),
                "upper": self.upper.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "SchedulingDomain":
        return SchedulingDomain(d["lower"], d["upper"], tuple(d["names"]))


def clamp_to_domain(zeta_raw, domain: SchedulingDomain):
    return domain.clamp(zeta_raw)


class TSSubModel:
    """One MISO sub-model: a grid of bell functions plus one affine consequent
    per rule, predicting a single state component one step ahead."""

    def __init__(self, mf_a, mf_b, mf_c, theta, target_index: int,
                 rule_mf=None):
        self.mf_a = np.asarray(mf_a, dtype=float)
        self.mf_b = np.asarray(mf_b, dtype=float)
        self.mf_c = np.asarray(mf_c, dtype=float)
        self.theta = np.asarray(theta, dtype=float)
        self.target_index = int(target_index)

        if self.mf_a.ndim != 2:
            raise ValueError("membership grids must be (n_inputs, n_mf)")
        if self.mf_a.shape != self.mf_b.shape or self.mf_a.shape != self.mf_c.shape:
            raise ValueError("membership parameter grids must share a shape")
        if np.any(self.mf_a <= 0.0) or np.any(self.mf_b <= 0.0):
            raise ValueError("gbell requires a > 0 and b > 0")

        n_in, n_mf = self.mf_a.shape
        expected = lexicographic_rule_grid(n_in, n_mf)
        if rule_mf is None:
            self.rule_mf = expected
        else:
            self.rule_mf = np.asarray(rule_mf, dtype=np.intp)
            if not np.array_equal(self.rule_mf, expected):
                raise ValueError("rules must follow the lexicographic order")

        n_rules = n_mf ** n_in
        if self.theta.shape != (n_rules, n_in + 1):
            raise ValueError(
                f"theta must be ({n_rules}, {n_in + 1}), got {self.theta.shape}")
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("consequents must be finite")

    @property
    def n_inputs(self) -> int:
        return self.mf_a.shape[0]

    @property
    def n_mf(self) -> int:
        return self.mf_a.shape[1]

    @property
    def n_rules(self) -> int:
        return self.theta.shape[0]

    @property
    def rules(self) -> list[Rule]:
        return [Rule(tuple(int(i) for i in self.rule_mf[k]),
                     tuple(float(v) for v in self.theta[k]))
                for k in range(self.n_rules)]

    def membership_grid(self, zeta) -> np.ndarray:
        """Degrees of every membership function, shape (n_inputs, n_mf)."""
        z = np.asarray(zeta, dtype=float)[:, None]
        u = np.abs((z - self.mf_c) / self.mf_a)
        with np.errstate(over="ignore"):
            t = u ** (2.0 * self.mf_b)
        return 1.0 / (1.0 + t)

    def membership_batch(self, Z) -> np.ndarray:
        """Degrees for a batch of scheduling vectors, shape (N, n_inputs, n_mf)."""
        Z = np.asarray(Z, dtype=float)[:, :, None]
        u = np.abs((Z - self.mf_c) / self.mf_a)
        with np.errstate(over="ignore"):
            t = u ** (2.0 * self.mf_b)
        return 1.0 / (1.0 + t)

    def firing_batch(self, Z) -> np.ndarray:
        """Rule firing strengths for a batch, shape (N, n_rules)."""
        deg = self.membership_batch(Z)
        cols = np.arange(self.n_inputs)[None, :]
        return np.prod(deg[:, cols, self.rule_mf], axis=-1)

    def normalized_firing_batch(self, Z) -> np.ndarray:
        W = self.firing_batch(Z)
        s = W.sum(axis=1, keepdims=True)
        if np.any(s == 0.0):
            raise DegenerateSchedulingError(
                "all firing strengths vanished for some scheduling vector")
        return W / s


def firing_strengths(zeta, sub: TSSubModel) -> np.ndarray:
    """Product-t-norm firing strength of every rule."""
    deg = sub.membership_grid(zeta)
    return np.prod(deg[np.arange(sub.n_inputs), sub.rule_mf], axis=1)


def normalize(mu) -> np.ndarray:
    """Normalized weights mu_i / sum(mu); convex-combination coefficients."""
    mu = np.asarray(mu, dtype=float)
    s = mu.sum()
    if s <= 0.0:
        raise DegenerateSchedulingError("sum of firing strengths is zero")
    return mu / s


class TSModel:
    """Stack of MISO sub-models sharing one scheduling domain and sampling time."""

    def __init__(self, submodels, dt: float, domain: SchedulingDomain):
        self.submodels = tuple(submodels)
        self.dt = float(dt)
        self.domain = domain
        if self.dt <= 0.0:
            raise ValueError("dt must be > 0")
        if len(self.submodels) != len(TARGET_NAMES):
            raise ValueError(f"expected {len(TARGET_NAMES)} sub-models")
        for j, sub in enumerate(self.submodels):
            if sub.target_index != j:
                raise ValueError("sub-models must be ordered by target index")
            if sub.n_inputs != domain.size:
                raise ValueError("sub-model input count must match domain")

    @property
    def n_states(self) -> int:
        return len(self.submodels)

    @property
    def n_inputs(self) -> int:
        return 2

    def save(self, path) -> None:
        save_model(self, path)


def instantiate(zeta, model: TSModel):
    """Blend the vertex systems at a scheduling point into (A, B, C).

    Row j comes from sub-model j: the convex combination of its rule
    consequents under the normalized firing weights.
    """
    n = model.n_states
    A = np.empty((n, n))
    B = np.empty((n, model.n_inputs))
    C = np.empty(n)
    for j, sub in enumerate(model.submodels):
        mu_n = normalize(firing_strengths(zeta, sub))
        row = mu_n @ sub.theta
        A[j] = row[:n]
        B[j] = row[n:n + model.n_inputs]
        C[j] = row[-1]
    return A, B, C


def predict_one_step(x, u, zeta, model: TSModel) -> np.ndarray:
    """x_next = A(zeta) x + B(zeta) u + C(zeta); already discrete at model.dt."""
    A, B, C = instantiate(zeta, model)
    return A @ np.asarray(x, dtype=float) + B @ np.asarray(u, dtype=float) + C


def save_model(model: TSModel, path) -> None:
    doc = {
        "version": MODEL_FORMAT_VERSION,
        "dt": model.dt,
        "domain": model.domain.to_dict(),
        "rule_order": "lexicographic, last input fastest",
        "submodels": [
            {
                "target": TARGET_NAMES[sub.target_index],
                "mfs": [
                    [{"a": float(sub.mf_a[i, m]),
                      "b": float(sub.mf_b[i, m]),
                      "c": float(sub.mf_c[i, m])}
                     for m in range(sub.n_mf)]
                    for i in range(sub.n_inputs)
                ],
                "rules": [
                    {"mf": [int(v) for v in sub.rule_mf[k]],
                     "p": [float(v) for v in sub.theta[k]]}
                    for k in range(sub.n_rules)
                ],
            }
            for sub in model.submodels
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_model(path) -> TSModel:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"not valid JSON: {exc}") from exc

    version = doc.get("version")
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported model version {version!r}, expected {MODEL_FORMAT_VERSION!r}")
    try:
        domain = SchedulingDomain.from_dict(doc["domain"])
        submodels = []
        for sd in doc["submodels"]:
            target = TARGET_NAMES.index(sd["target"])
            mfs = sd["mfs"]
            mf_a = np.array([[mf["a"] for mf in row] for row in mfs])
            mf_b = np.array([[mf["b"] for mf in row] for row in mfs])
            mf_c = np.array([[mf["c"] for mf in row] for row in mfs])
            rule_mf = np.array([r["mf"] for r in sd["rules"]], dtype=np.intp)
            theta = np.array([r["p"] for r in sd["rules"]])
            submodels.append(TSSubModel(mf_a, mf_b, mf_c, theta, target,
                                        rule_mf=rule_mf))
        return TSModel(submodels, doc["dt"], domain)
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ModelFormatError(f"malformed model file: {exc}") from exc

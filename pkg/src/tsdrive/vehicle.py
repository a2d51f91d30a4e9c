"""Nonlinear bicycle plant with simplified Magic-Formula lateral tires.

Serves both as the excitation-data generator for identification and as the
closed-loop truth model. All dynamics functions are pure; the measurement
noise stream is explicit state owned by the caller.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GRAVITY = 9.81

# Below this longitudinal speed the slip-angle expressions (division by vx)
# are meaningless; operations raise instead of clamping so identification
# data never silently contains singular samples.
VX_FLOOR = 0.05


class VxDomainError(ValueError):
    """Longitudinal speed left the valid domain (vx below floor)."""


@dataclass(frozen=True)
class VehicleParams:
    """Bicycle-model parameters; defaults are the 1/10-scale RC car values."""

    lf: float = 0.125      # CoG to front axle [m]
    lr: float = 0.125      # CoG to rear axle [m]
    m: float = 1.98        # mass [kg]
    inertia: float = 0.03  # yaw inertia [kg m^2]
    b: float = 6.0         # tire stiffness factor
    c: float = 1.6         # tire shape factor
    d: float = 7.76        # tire peak lateral force [N]
    mu: float = 0.1        # static friction coefficient
    g: float = GRAVITY

    def __post_init__(self):
        for name in ("lf", "lr", "m", "inertia", "b", "c", "d"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive")
        if self.mu < 0.0:
            raise ValueError("mu must be >= 0")


@dataclass(frozen=True)
class DynamicState:
    """Body-frame velocities: longitudinal, lateral, yaw rate."""

    vx: float
    vy: float
    omega: float

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.omega])

    @staticmethod
    def from_array(x) -> "DynamicState":
        return DynamicState(float(x[0]), float(x[1]), float(x[2]))


@dataclass(frozen=True)
class ControlInput:
    """Front steering angle [rad] and rear-wheel acceleration command [m/s^2]."""

    delta: float
    a: float

    def as_array(self) -> np.ndarray:
        return np.array([self.delta, self.a])

    @staticmethod
    def from_array(u) -> "ControlInput":
        return ControlInput(float(u[0]), float(u[1]))


@dataclass(frozen=True)
class NoiseSpec:
    """Measurement-noise variances for the two measurable states."""

    co_vx: float = 1e-6
    co_omega: float = 4e-8
    seed: int = 0

    def __post_init__(self):
        if self.co_vx < 0.0 or self.co_omega < 0.0:
            raise ValueError("noise variances must be >= 0")

    def stream(self) -> "NoiseStream":
        return NoiseStream(self)


class NoiseStream:
    """Deterministic Gaussian noise stream; owns the generator state."""

    def __init__(self, spec: NoiseSpec):
        self.spec = spec
        self._rng = np.random.default_rng(spec.seed)

    def draw(self) -> tuple[float, float]:
        n = self._rng.standard_normal(2)
        return (math.sqrt(self.spec.co_vx) * n[0],
                math.sqrt(self.spec.co_omega) * n[1])


def _check_vx(vx: float) -> None:
    if not vx > VX_FLOOR:
        raise VxDomainError(f"vx={vx:.4f} below floor {VX_FLOOR}")


def slip_angles(state: DynamicState, inp: ControlInput,
                params: VehicleParams) -> tuple[float, float]:
    """Front and rear slip angles [rad].

    Built from the axle lateral velocities vy + lf*omega (front) and
    vy - lr*omega (rear); with the signs the other way around the yaw mode
    is exponentially unstable (growth ~ c_alpha*(lf^2+lr^2)/(vx*I)) and the
    vehicle cannot corner at all.
    """
    _check_vx(state.vx)
    alpha_f = inp.delta - math.atan(state.vy / state.vx
                                    + params.lf * state.omega / state.vx)
    alpha_r = -math.atan(state.vy / state.vx
                         - params.lr * state.omega / state.vx)
    return alpha_f, alpha_r


def tire_forces(alpha_f: float, alpha_r: float,
                params: VehicleParams) -> tuple[float, float]:
    """Lateral tire forces [N] from the simplified Magic-Formula curve."""
    fyf = params.d * math.sin(params.c * math.atan(params.b * alpha_f))
    fyr = params.d * math.sin(params.c * math.atan(params.b * alpha_r))
    return fyf, fyr


def derivatives(state: DynamicState, inp: ControlInput,
                params: VehicleParams) -> np.ndarray:
    """Body-frame acceleration vector (dvx, dvy, domega).

    The friction term is (-Fyf*sin(delta) - mu*g)/m, i.e. mu*g is divided by
    the mass along with the steering component; dimensionally odd but kept
    verbatim so the simulated plant matches the identification target.
    """
    alpha_f, alpha_r = slip_angles(state, inp, params)
    fyf, fyr = tire_forces(alpha_f, alpha_r, params)
    sin_d = math.sin(inp.delta)
    cos_d = math.cos(inp.delta)
    dvx = inp.a + (-fyf * sin_d - params.mu * params.g) / params.m \
        + state.omega * state.vy
    dvy = (fyf * cos_d + fyr) / params.m - state.omega * state.vx
    domega = (fyf * params.lf * cos_d - fyr * params.lr) / params.inertia
    return np.array([dvx, dvy, domega])


def _deriv_array(x: np.ndarray, inp: ControlInput,
                 params: VehicleParams) -> np.ndarray:
    return derivatives(DynamicState.from_array(x), inp, params)


def step(state: DynamicState, inp: ControlInput, params: VehicleParams,
         dt: float) -> DynamicState:
    """Advance the plant by dt with a classical RK4 stage."""
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    x = state.as_array()
    k1 = _deriv_array(x, inp, params)
    k2 = _deriv_array(x + 0.5 * dt * k1, inp, params)
    k3 = _deriv_array(x + 0.5 * dt * k2, inp, params)
    k4 = _deriv_array(x + dt * k3, inp, params)
    x_next = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    _check_vx(x_next[0])
    return DynamicState.from_array(x_next)


def measure(state: DynamicState, stream: NoiseStream) -> tuple[float, float]:
    """Noisy (vx, omega) measurement; vy is not measurable."""
    n_vx, n_omega = stream.draw()
    return state.vx + n_vx, state.omega + n_omega

"""TOML run/identify configuration: sections mirror the runtime dataclasses
(`run`, `vehicle`, `noise`, `profile`, `mpc`, `mhe`, `solver`, `identify`).

Paths inside a config resolve relative to the config file location.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .anfis import LearnConfig
from .harness import RunConfig
from .mhe import MheConfig
from .mpc import MpcConfig
from .qp import QpSettings
from .references import Arc, ReferenceProfile, Segment, default_racing_profile
from .tsmodel import load_model
from .vehicle import NoiseSpec, VehicleParams


class ConfigError(ValueError):
    """Malformed or inconsistent configuration file."""


@dataclass(frozen=True)
class IdentifyConfig:
    duration: float = 240.0
    seed: int = 1
    holdout_duration: float = 60.0
    holdout_seed: int = 99
    learn: LearnConfig = LearnConfig()
    save_dataset: bool = True
    noisy_targets: bool = False


def _load_toml(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc


def _vehicle(doc: dict) -> VehicleParams:
    sec = doc.get("vehicle", {})
    try:
        return VehicleParams(**sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [vehicle] section: {exc}") from exc


def _noise(doc: dict, seed: int) -> NoiseSpec:
    sec = doc.get("noise", {})
    try:
        return NoiseSpec(co_vx=float(sec.get("co_vx", 1e-6)),
                         co_omega=float(sec.get("co_omega", 4e-8)),
                         seed=seed)
    except ValueError as exc:
        raise ConfigError(f"bad [noise] section: {exc}") from exc


def _profile(doc: dict) -> ReferenceProfile:
    sec = doc.get("profile", {"mode": "bundled"})
    mode = sec.get("mode", "bundled")
    try:
        if mode == "bundled":
            return default_racing_profile()
        if mode == "segments":
            return ReferenceProfile(
                [Segment(*map(float, s)) for s in sec["segments"]])
        if mode == "track":
            arcs = [Arc(*map(float, a)) for a in sec["arcs"]]
            return ReferenceProfile.from_track(
                arcs, vx_max=float(sec["vx_max"]),
                a_lat_max=float(sec["a_lat_max"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad [profile] section: {exc}") from exc
    raise ConfigError(f"unknown profile mode {mode!r}")


def _solver(doc: dict) -> QpSettings:
    sec = doc.get("solver", {})
    try:
        return QpSettings(
            eps_abs=float(sec.get("eps_abs", 1e-8)),
            eps_rel=float(sec.get("eps_rel", 1e-8)),
            max_iter=int(sec.get("max_iter", 20000)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [solver] section: {exc}") from exc


def _mpc(doc: dict, solver: QpSettings) -> MpcConfig:
    sec = doc.get("mpc", {})
    bounds = sec.get("bounds", {})
    try:
        delta = float(bounds.get("delta", 0.249))
        a_min = float(bounds.get("a_min", -1.0))
        a_max = float(bounds.get("a_max", 4.0))
        d_delta = float(bounds.get("d_delta", 0.05))
        d_a = float(bounds.get("d_a", 0.5))
        poly_A = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        cfg = MpcConfig(
            hp=int(sec.get("hp", 6)),
            Q=np.diag([float(v) for v in sec.get("q", [0.26, 6.5e-7, 0.39])]),
            R=np.diag([float(v) for v in sec.get("r", [0.245, 0.105])]),
            input_poly=(poly_A, np.array([delta, delta, a_max, -a_min])),
            rate_poly=(poly_A, np.array([d_delta, d_delta, d_a, d_a])),
            freeze_scheduling=bool(sec.get("freeze_scheduling", False)),
            terminal_cost_absolute=bool(sec.get("terminal_cost_absolute",
                                                False)),
            solver=solver)
        return cfg
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [mpc] section: {exc}") from exc


def _mhe(doc: dict, solver: QpSettings) -> MheConfig:
    sec = doc.get("mhe", {})
    box = sec.get("state_box", {})
    try:
        vx = [float(v) for v in box.get("vx", [0.1, 2.7])]
        vy = [float(v) for v in box.get("vy", [-0.12, 0.12])]
        om = [float(v) for v in box.get("omega", [-1.96, 1.96])]
        return MheConfig(
            hp=int(sec.get("hp", 10)),
            Q=np.diag([float(v) for v in sec.get("q", [0.125, 0.25, 0.125])]),
            R=np.diag([float(v) for v in sec.get("r", [0.25, 0.25])]),
            state_lower=np.array([vx[0], vy[0], om[0]]),
            state_upper=np.array([vx[1], vy[1], om[1]]),
            solver=solver)
    except (TypeError, ValueError, IndexError) as exc:
        raise ConfigError(f"bad [mhe] section: {exc}") from exc


def load_run_config(path, seed_override: int | None = None) -> RunConfig:
    path = Path(path)
    doc = _load_toml(path)
    run = doc.get("run", {})
    model_path = run.get("model")
    if model_path is None:
        raise ConfigError("missing run.model (path to the model file)")
    model_path = Path(model_path)
    if not model_path.is_absolute():
        model_path = path.parent / model_path
    try:
        model = load_model(model_path)
    except FileNotFoundError as exc:
        raise ConfigError(f"model file not found: {model_path}") from exc
    except ValueError as exc:
        raise ConfigError(f"cannot load model {model_path}: {exc}") from exc

    seed = int(run.get("seed", 0)) if seed_override is None else seed_override
    solver = _solver(doc)
    try:
        cfg = RunConfig(
            model=model,
            profile=_profile(doc),
            duration=float(run.get("duration", 120.0)),
            seed=seed,
            initial_state=tuple(float(v) for v in
                                run.get("initial_state", (1.0, 0.0, 0.0))),
            mpc=_mpc(doc, solver),
            mhe=_mhe(doc, solver),
            noise=_noise(doc, seed),
            vehicle=_vehicle(doc),
            delay_one_step=bool(run.get("delay_one_step", False)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [run] section: {exc}") from exc
    if cfg.duration <= 0.0:
        raise ConfigError("run.duration must be > 0")
    return cfg


def load_identify_config(path, seed_override: int | None = None):
    path = Path(path)
    doc = _load_toml(path)
    sec = doc.get("identify", {})
    try:
        seed = int(sec.get("seed", 1)) if seed_override is None else seed_override
        learn = LearnConfig(
            n_mf=int(sec.get("n_mf", 2)),
            epochs=int(sec.get("epochs", 10)),
            premise_step=float(sec.get("premise_step", 1e-3)),
            validation_fraction=float(sec.get("validation_fraction", 0.2)),
            seed=seed)
        ident = IdentifyConfig(
            duration=float(sec.get("duration", 240.0)),
            seed=seed,
            holdout_duration=float(sec.get("holdout_duration", 60.0)),
            holdout_seed=int(sec.get("holdout_seed", 99)),
            learn=learn,
            save_dataset=bool(sec.get("save_dataset", True)),
            noisy_targets=bool(sec.get("noisy_targets", False)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [identify] section: {exc}") from exc
    if ident.duration <= 0.0:
        raise ConfigError("identify.duration must be > 0")
    return ident, _vehicle(doc), _noise(doc, ident.seed)

"""Command-line entry point.

Subcommands: identify (excitation + training + model file), validate
(holdout metrics), simulate (open-loop plant run), run (closed loop),
report (metrics from an existing run log).

Exit codes: 0 success, 2 configuration error, 3 run abort.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .anfis import (TrainingDivergenceError, generate_excitation, train_model,
                    validate)
from .config import ConfigError, load_identify_config, load_run_config
from .harness import RunAbort, RunLog, compute_metrics, run_closed_loop
from .tsmodel import save_model
from .vehicle import VxDomainError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORT = 3


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_identify(args) -> int:
    ident, vehicle, noise = load_identify_config(args.config, args.seed)
    out = _out_dir(args)
    ds = generate_excitation(vehicle, noise, ident.duration, ident.seed,
                             noisy_targets=ident.noisy_targets)
    if ident.save_dataset:
        ds.save_csv(out / "dataset.csv")
    model, reports = train_model(ds, ident.learn)
    save_model(model, out / "model.json")

    holdout = generate_excitation(vehicle, noise, ident.holdout_duration,
                                  ident.holdout_seed)
    rep = validate(model, holdout)
    with open(out / "training_report.json", "w") as fh:
        json.dump({"submodels": [r.to_dict() for r in reports],
                   "domain": model.domain.to_dict(),
                   "dataset": ds.meta,
                   "holdout": rep.to_dict()}, fh, indent=1)
    print(f"model -> {out / 'model.json'}")
    print("holdout one-step RMSE:",
          " ".join(f"{name}={v:.3e}" for name, v in
                   zip(("vx", "vy", "omega"), rep.rmse)))
    return EXIT_OK


def cmd_validate(args) -> int:
    ident, vehicle, noise = load_identify_config(args.config, args.seed)
    cfg = load_run_config(args.config, args.seed)
    out = _out_dir(args)
    holdout = generate_excitation(vehicle, noise, ident.holdout_duration,
                                  ident.holdout_seed)
    rep = validate(cfg.model, holdout)
    with open(out / "validation.json", "w") as fh:
        json.dump(rep.to_dict(), fh, indent=1)
    print(json.dumps(rep.to_dict(), indent=1))
    return EXIT_OK


def cmd_simulate(args) -> int:
    ident, vehicle, noise = load_identify_config(args.config, args.seed)
    out = _out_dir(args)
    ds = generate_excitation(vehicle, noise, ident.duration, ident.seed)
    ds.save_csv(out / "openloop.csv")
    print(f"open-loop trajectory -> {out / 'openloop.csv'} "
          f"({len(ds)} samples, {ds.meta['resampled']} resampled inputs)")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    out = _out_dir(args)
    try:
        log = run_closed_loop(cfg)
    except RunAbort as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    log.to_csv(out / "runlog.csv")
    metrics = compute_metrics(log, cfg.mpc)
    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=1)
    print(f"run log -> {out / 'runlog.csv'}")
    print(f"tracking RMSE vx={metrics['tracking_rmse']['vx']:.4f} "
          f"omega={metrics['tracking_rmse']['omega']:.4f}; "
          f"mean MPC solve {metrics['solve_time_mpc']['mean']*1e3:.2f} ms")
    return EXIT_OK


def cmd_report(args) -> int:
    log_path = Path(args.log)
    if not log_path.exists():
        print(f"run log not found: {log_path}", file=sys.stderr)
        return EXIT_CONFIG
    out = _out_dir(args)
    try:
        log = RunLog.from_csv(log_path)
        metrics = compute_metrics(log)
    except ValueError as exc:
        print(f"cannot read run log: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=1)
    print(json.dumps(metrics, indent=1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsdrive",
        description="Learned TS vehicle models with predictive control and "
                    "moving-horizon estimation")
    sub = parser.add_subparsers(dest="command", required=True)

    def _common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="TOML config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default="out", help="output directory")

    _common(sub.add_parser("identify", help="generate data, train, save model"))
    _common(sub.add_parser("validate", help="holdout one-step metrics"))
    _common(sub.add_parser("simulate", help="open-loop plant run"))
    _common(sub.add_parser("run", help="closed-loop run"))
    rep = sub.add_parser("report", help="metrics from an existing run log")
    rep.add_argument("--log", required=True, help="runlog.csv path")
    rep.add_argument("--out", default="out", help="output directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"identify": cmd_identify, "validate": cmd_validate,
                "simulate": cmd_simulate, "run": cmd_run,
                "report": cmd_report}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergenceError, VxDomainError, RunAbort) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())

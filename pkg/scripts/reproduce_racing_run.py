#!/usr/bin/env python3
"""End-to-end experiment: identify the TS model from excitation data, check
it on a fresh holdout, close the loop on the bundled two-phase racing
profile and report tracking/estimation/solve-time metrics.

Usage: python scripts/reproduce_racing_run.py [--out out/experiment]
"""
import argparse
import json
import time
from pathlib import Path

from tsdrive.anfis import LearnConfig, generate_excitation, train_model, validate
from tsdrive.harness import RunConfig, compute_metrics, run_closed_loop
from tsdrive.references import default_racing_profile
from tsdrive.tsmodel import save_model
from tsdrive.vehicle import NoiseSpec, VehicleParams


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="out/experiment")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--duration", type=float, default=120.0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    vehicle = VehicleParams()
    noise = NoiseSpec(seed=args.seed)

    print("== identification ==")
    t0 = time.time()
    ds = generate_excitation(vehicle, noise, duration=240.0, seed=1)
    ds.save_csv(out / "dataset.csv")
    model, reports = train_model(ds, LearnConfig(epochs=args.epochs))
    save_model(model, out / "model.json")
    holdout = generate_excitation(vehicle, noise, duration=60.0, seed=99)
    rep = validate(model, holdout)
    print(f"trained in {time.time() - t0:.1f} s; holdout one-step RMSE "
          + " ".join(f"{n}={v:.2e}" for n, v in zip(("vx", "vy", "om"), rep.rmse)))

    print("== closed loop ==")
    cfg = RunConfig(model=model, profile=default_racing_profile(),
                    duration=args.duration, seed=args.seed, noise=noise,
                    vehicle=vehicle)
    t0 = time.time()
    log = run_closed_loop(cfg)
    print(f"{len(log)} steps in {time.time() - t0:.1f} s wall")
    log.to_csv(out / "runlog.csv")

    metrics = compute_metrics(log, cfg.mpc)
    with open(out / "metrics.json", "w") as fh:
        json.dump({"metrics": metrics,
                   "holdout": rep.to_dict(),
                   "training": [r.to_dict() for r in reports]}, fh, indent=1)
    print(json.dumps(metrics["tracking_rmse"], indent=1))
    print(f"mean MPC solve {metrics['solve_time_mpc']['mean'] * 1e3:.2f} ms, "
          f"p95 {metrics['solve_time_mpc']['p95'] * 1e3:.2f} ms")
    print(f"results -> {out}")


if __name__ == "__main__":
    main()

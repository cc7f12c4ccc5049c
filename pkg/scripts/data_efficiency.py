"""Evaluation MSE against observed fraction of the robot-arm grid.

PHRPINN is trained at each fraction; PINN always sees the full grid and is
the reference line.  Writes ``curve.csv`` (model, fraction, seed, mse).
"""
import argparse
import csv
import dataclasses
import os

import numpy as np

from hrpinn.experiment import ExperimentConfig, run_experiment
from hrpinn.systems import Trajectory

HERE = os.path.dirname(os.path.abspath(__file__))


def mse_rows(report, run_root, frac):
    """MSE of each run's saved prediction against the reference it was scored on."""
    ref = Trajectory.from_csv(os.path.join(run_root, "data", "reference.csv"))
    out = []
    for r in report.rows:
        path = os.path.join(run_root, "runs", f"{r['model']}_{r['projection']}_seed{r['seed']}",
                            "prediction.csv")
        if not os.path.exists(path):
            out.append((r["model"], frac, r["seed"], float("nan")))
            continue
        pred = Trajectory.from_csv(path)
        i0 = int(round((pred.times[0] - ref.times[0]) / ref.dt))
        truth = ref.states[i0:i0 + len(pred.times)]
        out.append((r["model"], frac, r["seed"], float(np.mean((pred.states - truth) ** 2))))
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config",
                    default=os.path.join(HERE, "..", "configs", "robot_arm_data_efficiency.yaml"))
    ap.add_argument("--fractions", type=float, nargs="+", default=[0.05, 0.1, 0.25, 0.5, 1.0])
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--seeds", type=int, nargs="+", default=None)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    cfg = ExperimentConfig.load(args.config)
    if args.epochs:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=args.epochs))
    if args.seeds:
        cfg = dataclasses.replace(cfg, seeds=args.seeds)
    out = args.out or cfg.output_dir
    rollout = [m for m in cfg.models if m.kind != "PINN"]
    pinn = [m for m in cfg.models if m.kind == "PINN"]
    rows = []
    for frac in args.fractions:
        c = dataclasses.replace(cfg, models=rollout, data=dict(cfg.data, train_fraction=frac))
        root = os.path.join(out, f"frac{frac:g}")
        rows += mse_rows(run_experiment(c, root), root, frac)
    if pinn:
        c = dataclasses.replace(cfg, models=pinn, data=dict(cfg.data, train_fraction=1.0))
        root = os.path.join(out, "pinn")
        rows += mse_rows(run_experiment(c, root), root, 1.0)
    with open(os.path.join(out, "curve.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("model", "fraction", "seed", "mse"))
        w.writerows((m, repr(f), s, repr(v)) for m, f, s, v in rows)
    for m, f, s, v in rows:
        print(f"{m:<8} {f:5.2f} seed={s} mse={v:.3e}")


if __name__ == "__main__":
    main()

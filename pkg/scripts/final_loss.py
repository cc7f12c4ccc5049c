"""Final-loss comparison PHRPINN vs PNODE on mass-spring and robot arm.

Usage: python3 scripts/final_loss.py [--epochs 100] [--seeds 0 1 2 3 4] [--out runs/final_loss]
"""
import argparse
import dataclasses
import os

from hrpinn.experiment import ExperimentConfig, compare_models, format_comparison, run_experiment
from hrpinn.train import TrainConfig

HERE = os.path.dirname(os.path.abspath(__file__))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="runs/final_loss")
    args = ap.parse_args()
    for system in ("mass_spring", "robot_arm"):
        cfg = ExperimentConfig.load(os.path.join(HERE, "..", "configs", f"final_loss_{system}.yaml"))
        cfg = dataclasses.replace(cfg, seeds=args.seeds,
                                  train=dataclasses.replace(cfg.train, epochs=args.epochs))
        report = run_experiment(cfg, os.path.join(args.out, system))
        print(f"== {system}")
        print(format_comparison(compare_models(report)))


if __name__ == "__main__":
    main()

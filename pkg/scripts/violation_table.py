"""Constraint-violation table (mean/max per model) on mass-spring."""
import argparse
import os

from hrpinn.experiment import ExperimentConfig, run_experiment

HERE = os.path.dirname(os.path.abspath(__file__))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=os.path.join(HERE, "..", "configs", "violation_table.yaml"))
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    cfg = ExperimentConfig.load(args.config)
    report = run_experiment(cfg, args.out)
    print(f"{'model':<10} {'proj':<7} {'mean_viol':>11} {'max_viol':>11} {'mae':>10} div")
    for s in report.summary():
        print(f"{s['model']:<10} {s['projection']:<7} {s['mean_viol_mean']:11.3e} "
              f"{s['max_viol_mean']:11.3e} {s['mae_mean']:10.3e} {s['diverged']}")


if __name__ == "__main__":
    main()

"""Battery HRPINN vs zero-V_INT ablation and RK oracle."""
import argparse
import os

from hrpinn.experiment import ExperimentConfig, run_experiment

HERE = os.path.dirname(os.path.abspath(__file__))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=os.path.join(HERE, "..", "configs", "battery.yaml"))
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    cfg = ExperimentConfig.load(args.config)
    out = args.out or cfg.output_dir
    report = run_experiment(cfg, out)
    for r in report.rows:
        print(f"{r['model']:<18} seed={r['seed']} mae={r['mae']:.4e} V  dtw={r['dtw']:.4e}")
    learned = [r["mae"] for r in report.rows if r["model"] == "HRPINN"]
    zero = [r["mae"] for r in report.rows if r["model"] == "HRPINN-zeroVINT"][0]
    print(f"zero-VINT / learned MAE ratio: {zero / min(learned):.1f}")
    print(f"ground-truth discharges in {os.path.join(out, 'data')}")


if __name__ == "__main__":
    main()

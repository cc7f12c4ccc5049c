"""Command line entry point: ``hrpinn {generate,train,sweep,report}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from .errors import ConfigError, HrpinnError
from .experiment import (SUMMARY_COLUMNS, ExperimentConfig, ExperimentReport, compare_models,
                         format_comparison, generate_data, run_experiment, write_rows)


def _load(args):
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=[int(args.seed)])
    out = args.out or os.environ.get("HRPINN_OUTPUT_DIR") or cfg.output_dir
    return cfg, out


def cmd_generate(args):
    cfg, out = _load(args)
    for path in generate_data(cfg, os.path.join(out, "data")):
        print(path)
    return 0


def cmd_train(args):
    cfg, out = _load(args)
    if cfg.system != "battery":
        if not 0 <= args.model < len(cfg.models):
            raise ConfigError([f"--model must be in [0, {len(cfg.models) - 1}]"])
        cfg = dataclasses.replace(cfg, models=[cfg.models[args.model]], seeds=cfg.seeds[:1])
    else:
        cfg = dataclasses.replace(cfg, seeds=cfg.seeds[:1])
    report = run_experiment(cfg, out)
    for r in report.rows:
        print(f"{r['model']} {r['projection']} seed={r['seed']} final_loss={r['final_loss']:.6g} "
              f"mae={r['mae']:.6g} diverged={int(r['diverged'])}")
    return 0


def cmd_sweep(args):
    cfg, out = _load(args)
    report = run_experiment(cfg, out, threads=args.threads)
    print(f"wrote {os.path.join(out, 'report.csv')} ({len(report.rows)} rows)")
    return 0


def cmd_report(args):
    out = args.out
    if out is None and args.config:
        out = _load(args)[1]
    if out is None:
        raise ConfigError(["report needs --out or --config"])
    report = ExperimentReport.read(out)
    write_rows(os.path.join(out, "summary.csv"), SUMMARY_COLUMNS, report.summary())
    try:
        print(format_comparison(compare_models(report)))
    except ConfigError:
        for s in report.summary():
            print(f"{s['model']} {s['projection']} mae={s['mae_mean']:.4g} "
                  f"final_loss={s['final_loss_mean']:.4g} diverged={s['diverged']}/{s['runs']}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="hrpinn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment YAML file")
        sp.add_argument("--out", default=None, help="output directory (overrides the config)")
        sp.add_argument("--seed", type=int, default=None, help="run this seed only")
        sp.add_argument("--threads", type=int, default=1, help="parallel model workers")
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("generate", help="write reference data"))
    t = sub.add_parser("train", help="train one model for one seed")
    common(t)
    t.add_argument("--model", type=int, default=0, help="index into the config's model list")
    common(sub.add_parser("sweep", help="train and evaluate every (model, seed) pair"))
    common(sub.add_parser("report", help="re-aggregate an existing run directory"),
           config_required=False)
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "sweep": cmd_sweep,
            "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except (HrpinnError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Declarative experiments: config files, seed sweeps and report tables.

A config is one YAML document.  Benchmark example::

    name: mass_spring_desk
    system: mass_spring
    data:
      dt: 0.01
      K: 1000              # training horizon (steps)
      eval_K: 1000         # evaluation horizon
      eval: continuation   # continuation -> [T, 2T]; train_window -> [0, T]
      train_fraction: 1.0  # fraction of the training grid observed by rollout models
      train_sampling: stride   # stride -> every (1/fraction)-th sample; prefix -> first part
      projected: true
      tol: 1.0e-12
    models:
      - {kind: PHRPINN, projection_mode: robust}
      - {kind: PNODE, projection_mode: robust}
    train: {epochs: 100, lr: 1.0e-3}
    seeds: [0, 1, 2, 3, 4]
    output_dir: runs/mass_spring_desk

Battery example::

    system: battery
    battery:
      profiles: [0.5, 1.0, 2.0]
      train_profiles: [0.5, 2.0]
      dt: 1.0
      v_cutoff: 2.7
      params: {}           # BatteryParams overrides
    battery_model: {hidden: [11], integrator: euler}
    train: {epochs: 300, lr: 1.0e-2}
    seeds: [0]

Every top-level key other than those above is rejected.  Report CSVs have
fixed columns (:data:`REPORT_COLUMNS`); ``mae``/``dtw`` are in state units
(volts for the battery), violations in constraint units, ``wall_s`` in
seconds and blank unless ``record_wall_time`` is set, because a wall clock
would make reruns differ byte-wise.  Timings always go to ``timings.csv``.

Per run, ``runs/<model>_<projection>_seed<s>/`` holds ``loss.csv``,
``model.json`` and ``prediction.csv`` (the evaluated trajectory).
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import battery as bat
from . import nn
from .errors import ConfigError
from .integrate import generate_reference
from .metrics import dtw, mae
from .models import Model, ModelConfig, save_model
from .systems import SYSTEMS, Trajectory, make_system
from .train import TrainConfig, train_loss_fn, train_seeds, write_loss_curve

REPORT_COLUMNS = ("system", "model", "projection", "seed", "mae", "dtw", "mean_viol",
                  "max_viol", "final_loss", "epochs", "wall_s", "diverged")
SUMMARY_COLUMNS = ("system", "model", "projection", "runs", "diverged", "mae_mean", "mae_std",
                   "dtw_mean", "dtw_std", "mean_viol_mean", "mean_viol_std", "max_viol_mean",
                   "max_viol_std", "final_loss_mean", "final_loss_std")
TOP_KEYS = {"name", "system", "data", "models", "train", "seeds", "output_dir",
            "record_wall_time", "battery", "battery_model"}
DATA_DEFAULTS = {"dt": 0.01, "K": 1000, "eval_K": 1000, "eval": "continuation",
                 "train_fraction": 1.0, "train_sampling": "stride", "projected": True, "tol": 1e-12, "x0": None}
BATTERY_DEFAULTS = {"profiles": [0.5, 1.0, 2.0], "train_profiles": [0.5, 2.0], "dt": 1.0,
                    "v_cutoff": 2.7, "duration": 20000.0, "params": {}}


@dataclass
class ExperimentConfig:
    system: str
    models: list = field(default_factory=list)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: list = field(default_factory=lambda: [0])
    data: dict = field(default_factory=dict)
    battery: dict = field(default_factory=dict)
    battery_model: dict = field(default_factory=dict)
    output_dir: str = "runs/experiment"
    name: str = "experiment"
    record_wall_time: bool = False

    @classmethod
    def from_dict(cls, raw):
        """Validate a raw mapping, collecting every problem before raising."""
        if not isinstance(raw, dict):
            raise ConfigError(["config must be a mapping"])
        problems = [f"unknown top-level key {k!r}" for k in sorted(set(raw) - TOP_KEYS)]
        system = raw.get("system")
        if system != "battery" and system not in SYSTEMS:
            problems.append(f"system must be 'battery' or one of {sorted(SYSTEMS)}, got {system!r}")
        seeds = raw.get("seeds", [0])
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            problems.append("seeds must be a nonempty list of integers")
        elif len(set(seeds)) != len(seeds):
            problems.append("seeds must be distinct")
        train = None
        try:
            tr = dict(raw.get("train") or {})
            tr.pop("seed", None)
            train = TrainConfig(**tr)
        except ConfigError as exc:
            problems.extend(f"train: {p}" for p in exc.problems)
        except TypeError as exc:
            problems.append(f"train: {exc}")
        data = dict(DATA_DEFAULTS)
        data.update(raw.get("data") or {})
        extra = sorted(set(data) - set(DATA_DEFAULTS))
        problems.extend(f"data: unknown key {k!r}" for k in extra)
        if data["eval"] not in ("continuation", "train_window"):
            problems.append("data.eval must be continuation or train_window")
        if not 0 < float(data["train_fraction"]) <= 1:
            problems.append("data.train_fraction must be in (0, 1]")
        if data["train_sampling"] not in ("stride", "prefix"):
            problems.append("data.train_sampling must be stride or prefix")
        models = []
        if system == "battery":
            b = dict(BATTERY_DEFAULTS)
            b.update(raw.get("battery") or {})
            problems.extend(f"battery: unknown key {k!r}" for k in sorted(set(b) - set(BATTERY_DEFAULTS)))
            try:
                bat.BatteryParams.from_dict(b["params"])
                bat.BatteryModelConfig(**(raw.get("battery_model") or {}))
            except ConfigError as exc:
                problems.extend(f"battery: {p}" for p in exc.problems)
            except TypeError as exc:
                problems.append(f"battery_model: {exc}")
            if not set(b["train_profiles"]) <= set(b["profiles"]):
                problems.append("battery.train_profiles must be a subset of battery.profiles")
        else:
            b = {}
            entries = raw.get("models") or []
            if not entries:
                problems.append("models: at least one model is required")
            for i, m in enumerate(entries):
                m = dict(m)
                m.setdefault("system", system)
                m.setdefault("dt", data["dt"])
                m.setdefault("K", data["K"])
                if m["system"] != system:
                    problems.append(f"models[{i}]: system must match the experiment system")
                try:
                    models.append(ModelConfig.from_dict(m))
                except ConfigError as exc:
                    problems.extend(f"models[{i}]: {p}" for p in exc.problems)
                except TypeError as exc:
                    problems.append(f"models[{i}]: {exc}")
        if problems:
            raise ConfigError(problems)
        return cls(system=system, models=models, train=train, seeds=list(seeds), data=data,
                   battery=b, battery_model=dict(raw.get("battery_model") or {}),
                   output_dir=str(raw.get("output_dir", "runs/experiment")),
                   name=str(raw.get("name", "experiment")),
                   record_wall_time=bool(raw.get("record_wall_time", False)))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def to_dict(self):
        d = {"name": self.name, "system": self.system, "seeds": list(self.seeds),
             "train": dataclasses.asdict(self.train), "output_dir": self.output_dir,
             "record_wall_time": self.record_wall_time}
        d["train"].pop("seed", None)
        if self.system == "battery":
            d["battery"] = copy.deepcopy(self.battery)
            d["battery_model"] = copy.deepcopy(self.battery_model)
        else:
            d["data"] = dict(self.data)
            d["models"] = [m.to_dict() for m in self.models]
        return d


@dataclass
class ExperimentReport:
    rows: list
    timings: list = field(default_factory=list)

    def summary(self):
        """Mean and std per (system, model, projection) over non-divergent runs."""
        groups = {}
        for r in self.rows:
            groups.setdefault((r["system"], r["model"], r["projection"]), []).append(r)
        out = []
        for (system, model, proj), rows in groups.items():
            ok = [r for r in rows if not r["diverged"]]
            s = {"system": system, "model": model, "projection": proj, "runs": len(rows),
                 "diverged": len(rows) - len(ok)}
            for key in ("mae", "dtw", "mean_viol", "max_viol", "final_loss"):
                vals = np.array([r[key] for r in ok], dtype=np.float64)
                vals = vals[np.isfinite(vals)]
                s[f"{key}_mean"] = float(vals.mean()) if vals.size else float("nan")
                s[f"{key}_std"] = float(vals.std()) if vals.size else float("nan")
            out.append(s)
        return out

    def write(self, out_dir, record_wall_time=False):
        os.makedirs(out_dir, exist_ok=True)
        write_rows(os.path.join(out_dir, "report.csv"), REPORT_COLUMNS, self.rows,
                   blank=() if record_wall_time else ("wall_s",))
        write_rows(os.path.join(out_dir, "summary.csv"), SUMMARY_COLUMNS, self.summary())
        if self.timings:
            write_rows(os.path.join(out_dir, "timings.csv"),
                       ("model", "projection", "seed", "wall_s"), self.timings)

    @classmethod
    def read(cls, out_dir):
        path = os.path.join(out_dir, "report.csv")
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
                raise ConfigError([f"{path}: unexpected report columns"])
            rows = []
            for r in reader:
                row = dict(r)
                for key in ("mae", "dtw", "mean_viol", "max_viol", "final_loss"):
                    row[key] = float(row[key])
                row["seed"], row["epochs"] = int(row["seed"]), int(row["epochs"])
                row["wall_s"] = float(row["wall_s"]) if row["wall_s"] else float("nan")
                row["diverged"] = row["diverged"] == "1"
                rows.append(row)
        return cls(rows)


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return "nan" if not math.isfinite(v) else repr(float(v))
    return str(v)


def write_rows(path, columns, rows, blank=()):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if c in blank else _fmt(r[c]) for c in columns])


# --- reference data ----------------------------------------------------------------

_REFERENCE_CACHE = {}


def reference_for(config):
    """Training and full reference trajectories, cached per process."""
    d = config.data
    key = (config.system, float(d["dt"]), int(d["K"]), int(d["eval_K"]), bool(d["projected"]),
           float(d["tol"]), None if d["x0"] is None else tuple(d["x0"]))
    if key not in _REFERENCE_CACHE:
        system = make_system(config.system, d["x0"])
        total = int(d["K"]) + (int(d["eval_K"]) if d["eval"] == "continuation" else 0)
        total = max(total, int(d["K"]))
        ref = generate_reference(system, dt=d["dt"], K=total, projected=d["projected"],
                                 tol=d["tol"])
        _REFERENCE_CACHE[key] = (system, ref)
    return _REFERENCE_CACHE[key]


def training_window(config, ref):
    K = int(config.data["K"])
    return ref.window(0, K + 1)


def subsample(config, data, mc):
    """Apply ``train_fraction`` to a rollout model's training data.

    Returns the (possibly shortened) trajectory and the observed grid indices
    (``None`` meaning every step).  PINN always sees the full window.
    """
    frac = float(config.data["train_fraction"])
    if mc.kind == "PINN" or frac >= 1.0:
        return data, None
    if config.data["train_sampling"] == "prefix":
        return data.window(0, max(2, int(round(frac * data.K)) + 1)), None
    stride = max(1, int(round(1.0 / frac)))
    return data, np.arange(stride, data.K + 1, stride)


def model_name(mc):
    return "HRPINN-soft" if (mc.kind == "HRPINN" and mc.soft_constraint) else mc.kind


# --- benchmark runs ----------------------------------------------------------------

def evaluate(model, params, config, ref, train_range):
    """Prediction on the evaluation window and its metrics."""
    d = config.data
    K = int(d["K"])
    if d["eval"] == "continuation":
        start, steps = K, int(d["eval_K"])
    else:
        start, steps = 0, K
    truth = ref.window(start, start + steps + 1)
    inputs = None
    if model.system.input_fn is None and truth.inputs is not None:
        inputs = truth.inputs
    _, pred, viol = model.predict_members(params, truth.states[0], float(truth.times[0]), steps,
                                          inputs=inputs, train_range=train_range)
    return truth, pred, viol


def _metrics(truth, pred, viol):
    if not np.all(np.isfinite(pred)):
        return {"mae": float("nan"), "dtw": float("nan"), "mean_viol": float("nan"),
                "max_viol": float("nan")}
    mv, xv = float(np.mean(viol)), float(np.max(viol))
    return {"mae": mae(pred, truth.states), "dtw": dtw(pred, truth.states),
            "mean_viol": mv, "max_viol": xv}


def run_model(config, mc, seeds, out_dir=None):
    """Train one model for all seeds (sharing one tape) and evaluate each."""
    system, ref = reference_for(config)
    data = training_window(config, ref)
    data, observed = subsample(config, data, mc)
    mc = dataclasses.replace(mc, K=data.K) if mc.K != data.K else mc
    model = Model(mc, system)
    results = train_seeds(model, config.train, data, seeds, observed)
    train_range = (float(data.times[0]), float(data.times[-1]))
    rows, timings = [], []
    for seed, res in zip(seeds, results):
        truth, pred, viol = evaluate(model, res.params, config, ref, train_range)
        m = _metrics(truth, pred, viol)
        diverged = bool(res.diverged) or not np.isfinite(m["mae"])
        row = {"system": config.system, "model": model_name(mc), "projection": mc.projection_mode,
               "seed": int(seed), **m, "final_loss": res.final_loss, "epochs": res.epochs,
               "wall_s": res.wall_seconds, "diverged": diverged}
        rows.append(row)
        timings.append({"model": row["model"], "projection": row["projection"], "seed": seed,
                        "wall_s": res.wall_seconds})
        if out_dir is not None:
            run_dir = os.path.join(out_dir, "runs", f"{row['model']}_{row['projection']}_seed{seed}")
            os.makedirs(run_dir, exist_ok=True)
            write_loss_curve(os.path.join(run_dir, "loss.csv"), res,
                             record_wall_time=config.record_wall_time)
            save_model(os.path.join(run_dir, "model.json"), mc, res.params)
            if np.all(np.isfinite(pred)):
                Trajectory(truth.times, pred).to_csv(os.path.join(run_dir, "prediction.csv"))
    return rows, timings


def _run_model_job(args):
    config, mc, seeds, out_dir = args
    return run_model(config, mc, seeds, out_dir)


# --- battery runs --------------------------------------------------------------------

def battery_data(config):
    b = config.battery
    params = bat.BatteryParams.from_dict(b["params"])
    out = {}
    for current in b["profiles"]:
        prof = bat.constant_profile(current, b["duration"], b["dt"])
        out[float(current)] = bat.generate_discharge(params, prof, b["dt"], b["v_cutoff"])
    return params, out


def run_battery(config, out_dir=None):
    """HRPINN with learned V_INT against the zero-V_INT ablation and the RK oracle."""
    params, discharges = battery_data(config)
    mcfg = bat.BatteryModelConfig(**config.battery_model)
    mcfg = dataclasses.replace(mcfg, dt=float(config.battery["dt"]))
    train_set = [discharges[float(c)] for c in config.battery["train_profiles"]]
    rows, timings = [], []

    def score(vint=None, net=None):
        maes, dtws = [], []
        for d in discharges.values():
            v = bat.predict_voltage(params, d, mcfg, params=net, vint=vint)
            maes.append(mae(v, d.voltage))
            dtws.append(dtw(v, d.voltage))
        return float(np.mean(maes)), float(np.mean(dtws))

    for seed in config.seeds:
        net = bat.init_battery_params(mcfg, seed)
        res = train_loss_fn(lambda p: bat.battery_loss(p, params, train_set, mcfg), net,
                            config.train)
        m, dd = score(net=res.params) if not res.diverged or res.epochs else (float("nan"),) * 2
        rows.append({"system": "battery", "model": "HRPINN", "projection": "none", "seed": seed,
                     "mae": m, "dtw": dd, "mean_viol": float("nan"), "max_viol": float("nan"),
                     "final_loss": res.final_loss, "epochs": res.epochs,
                     "wall_s": res.wall_seconds, "diverged": bool(res.diverged)})
        timings.append({"model": "HRPINN", "projection": "none", "seed": seed,
                        "wall_s": res.wall_seconds})
        if out_dir is not None:
            run_dir = os.path.join(out_dir, "runs", f"battery_HRPINN_seed{seed}")
            os.makedirs(run_dir, exist_ok=True)
            write_loss_curve(os.path.join(run_dir, "loss.csv"), res,
                             record_wall_time=config.record_wall_time)
            for k in ("p", "n"):
                nn.save(res.params[k], os.path.join(run_dir, f"vint_{k}.json"))
    for label, vint in (("HRPINN-zeroVINT", (bat.zero_vint, bat.zero_vint)),
                        ("HRPINN-oracleVINT", bat.rk_vint(params))):
        m, dd = score(vint=vint)
        rows.append({"system": "battery", "model": label, "projection": "none", "seed": 0,
                     "mae": m, "dtw": dd, "mean_viol": float("nan"), "max_viol": float("nan"),
                     "final_loss": float("nan"), "epochs": 0, "wall_s": float("nan"),
                     "diverged": False})
    return rows, timings


# --- orchestration ------------------------------------------------------------------

def generate_data(config, out_dir):
    """Write the reference data a config trains on."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if config.system == "battery":
        _, discharges = battery_data(config)
        for current, d in discharges.items():
            stem = os.path.join(out_dir, f"discharge_{current:g}A")
            d.to_csv(stem + ".csv")
            d.latent_to_csv(stem + "_latent.csv")
            written += [stem + ".csv", stem + "_latent.csv"]
    else:
        _, ref = reference_for(config)
        path = os.path.join(out_dir, "reference.csv")
        ref.to_csv(path)
        written.append(path)
    return written


def run_experiment(config, out_dir=None, threads=1):
    """Train every (model, seed) pair, evaluate and write all artifacts.

    Rows come out in config order (models, then seeds) whatever ``threads``
    is, so reports are reproducible byte for byte.
    """
    out_dir = config.output_dir if out_dir is None else out_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.yaml"), "w", encoding="utf-8") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=True)
    generate_data(config, os.path.join(out_dir, "data"))
    if config.system == "battery":
        rows, timings = run_battery(config, out_dir)
    else:
        jobs = [(config, mc, list(config.seeds), out_dir) for mc in config.models]
        if threads > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(_run_model_job, jobs))
        else:
            parts = [_run_model_job(j) for j in jobs]
        rows = [r for p in parts for r in p[0]]
        timings = [t for p in parts for t in p[1]]
    report = ExperimentReport(rows, timings)
    report.write(out_dir, config.record_wall_time)
    return report


def compare_models(report):
    """Rankings per metric plus directional claims between model families.

    Returns ``{"rankings": {metric: [(model, projection, mean), ...]},
    "claims": {name: bool}, "ratios": {name: float}}``; lower is better
    everywhere, divergent runs are excluded.
    """
    summ = report.summary()
    if len({(s["model"], s["projection"]) for s in summ}) < 2:
        raise ConfigError(["compare_models needs at least two models"])
    rankings = {}
    for metric in ("mae", "dtw", "mean_viol", "final_loss"):
        vals = [(s["model"], s["projection"], s[f"{metric}_mean"]) for s in summ]
        vals.sort(key=lambda v: (not math.isfinite(v[2]), v[2] if math.isfinite(v[2]) else 0.0))
        rankings[metric] = vals
    by_model = {}
    for s in summ:
        by_model.setdefault(s["model"], []).append(s)

    def best(model, metric):
        vals = [s[f"{metric}_mean"] for s in by_model.get(model, [])
                if math.isfinite(s[f"{metric}_mean"])]
        return min(vals) if vals else None

    claims, ratios = {}, {}
    for a, b in (("PHRPINN", "PNODE"), ("HRPINN", "NODE"), ("PHRPINN", "PINN"),
                 ("PHRPINN", "HRPINN")):
        for metric in ("final_loss", "mae"):
            x, y = best(a, metric), best(b, metric)
            if x is None or y is None:
                continue
            claims[f"{a} {metric} < {b} {metric}"] = bool(x < y)
            ratios[f"{b}/{a} {metric}"] = y / x if x > 0 else float("inf")
    return {"rankings": rankings, "claims": claims, "ratios": ratios}


def format_comparison(cmp):
    lines = []
    for metric, vals in cmp["rankings"].items():
        lines.append(f"[{metric}]")
        for rank, (model, proj, v) in enumerate(vals, 1):
            mark = " *" if rank == 1 else ""
            lines.append(f"  {rank}. {model:<18} {proj:<7} {v:.4g}{mark}")
    if cmp["claims"]:
        lines.append("[claims]")
        for k, v in cmp["claims"].items():
            lines.append(f"  {k}: {'yes' if v else 'no'}")
    return "\n".join(lines)

"""Command-line front end: simulate, train, evaluate, predict, export-trajectory.

Every command reads an optional flat YAML config (``--config``); explicit
flags override file values, which override the defaults in ``RunConfig``.
Outputs are CSV or JSON with floats written via ``repr`` so reruns under the
same seeds are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import data_model as dm
from .evaluation import landmark_evaluate, subgroup_summary
from .finegray import FitConfig, fit_config_to_dict
from .stepwise import DEFAULT_HORIZONS, StepwiseModel, fit_stepwise
from .synth import SynthConfig, write_simulation

log = logging.getLogger("stepfg")

BP_REFERENCE = (65.0, 100.0)
_FIT_KEYS = {f.name for f in fields(FitConfig)}
_SYNTH_PREFIX = "synth_"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data_dir: str = "data"
    out_dir: str = "out"
    model_dir: str = ""  # empty: <out_dir>/models
    fit: FitConfig = field(default_factory=FitConfig)
    t_min: float = 6.0
    step_hours: float = 5.0
    max_t: float = 240.0
    gap_limit_hours: float = 5.0
    horizons: tuple = DEFAULT_HORIZONS
    eval_times: tuple = (6.0, 12.0, 24.0, 48.0)
    events: tuple = ()  # empty: every event code present in the data
    n_events: int = dm.DEFAULT_N_EVENTS
    seed: int = 0
    repeats: int = 5
    split: tuple = (0.64, 0.16, 0.20)
    grid_size: int = 100
    filter_years: tuple | None = None
    subgroup_horizon: float = 240.0
    subgroup_t_max: float = 72.0
    trajectory_horizon: float = 72.0
    synth: SynthConfig = field(default_factory=SynthConfig)

    @property
    def models(self) -> Path:
        return Path(self.model_dir) if self.model_dir else Path(self.out_dir) / "models"

    @property
    def seeds(self) -> list:
        return [self.seed + r for r in range(self.repeats)]

    def fit_for(self, seed: int) -> FitConfig:
        return replace(self.fit, seed=seed, eval_times=self.eval_times)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("fit", "synth")}
        d.update(fit_config_to_dict(self.fit))
        d.update({_SYNTH_PREFIX + k: v for k, v in self.synth.to_dict().items() if k != "seed"})
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def parse_years(text) -> tuple:
    """``"2020..2021"`` -> ``(2020, 2021)``."""
    if isinstance(text, (list, tuple)):
        parts = list(text)
    else:
        parts = str(text).split("..")
    try:
        a, b = (int(p) for p in parts)
    except (TypeError, ValueError):
        raise ConfigError(f"filter_years must look like A..B, got {text!r}") from None
    if a > b:
        raise ConfigError(f"filter_years range is empty: {text!r}")
    return a, b


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, file values and flag overrides (later wins)."""
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    run_names = {f.name for f in fields(RunConfig)} - {"fit", "synth"}
    synth_names = {f.name for f in fields(SynthConfig)} - {"seed"}  # the run seed drives simulation
    run, fit, synth = {}, {}, {}
    for key, value in merged.items():
        if key in run_names:
            run[key] = value
        elif key in _FIT_KEYS and key not in ("seed", "eval_times"):
            fit[key] = value
        elif key.startswith(_SYNTH_PREFIX) and key[len(_SYNTH_PREFIX):] in synth_names:
            synth[key[len(_SYNTH_PREFIX):]] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        for key in ("horizons", "eval_times", "split"):
            if key in run:
                run[key] = tuple(float(v) for v in run[key])
        if "events" in run:
            run["events"] = tuple(int(v) for v in run["events"])
        if run.get("filter_years") is not None:
            run["filter_years"] = parse_years(run["filter_years"])
        for key in ("seed", "repeats", "n_events", "grid_size"):
            if key in run:
                run[key] = int(run[key])
        cfg = RunConfig(**run, fit=FitConfig(**fit), synth=SynthConfig(**synth))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    if cfg.repeats < 1:
        raise ConfigError("repeats must be at least 1")
    if any(b <= a for a, b in zip(cfg.horizons, cfg.horizons[1:])):
        raise ConfigError("horizons must be strictly increasing")
    return cfg


def read_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        values = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from None
    if not isinstance(values, dict):
        raise ConfigError(f"{p}: expected a mapping of keys to values")
    return values


# ------------------------------------------------------------------ helpers


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def load_data(cfg: RunConfig) -> dm.Dataset:
    d = Path(cfg.data_dir)
    subjects, series = d / "subjects.csv", d / "timeseries.csv"
    for p in (subjects, series):
        if not p.is_file():
            raise ConfigError(f"missing input file {p}")
    return dm.load_dataset(subjects, series, n_events=cfg.n_events, exclude_years=cfg.filter_years)


def resolve_events(cfg: RunConfig, ds: dm.Dataset) -> list:
    if cfg.events:
        bad = [k for k in cfg.events if not 1 <= k <= ds.n_events]
        if bad:
            raise ConfigError(f"event code(s) {bad} outside 1..{ds.n_events}")
        return list(cfg.events)
    return sorted({s.event for s in ds.subjects} - {0})


def eval_grid(cfg: RunConfig) -> list:
    """Hourly prediction times used for validation and test snapshots."""
    return [float(t) for t in np.arange(cfg.t_min, cfg.max_t + 0.5, 1.0)]


def prepare(cfg: RunConfig, ds: dm.Dataset, seed: int):
    """Split by ``seed`` and build train (regular grid) and val/test (hourly) snapshots."""
    train, val, test = dm.split_stratified(ds, cfg.split, seed)
    snaps_tr = dm.build_snapshots(train, cfg.t_min, cfg.step_hours, cfg.max_t, cfg.gap_limit_hours)
    grid = eval_grid(cfg)
    snaps_va = dm.build_snapshots(val, cfg.t_min, cfg.step_hours, cfg.max_t, cfg.gap_limit_hours, grid)
    snaps_te = dm.build_snapshots(test, cfg.t_min, cfg.step_hours, cfg.max_t, cfg.gap_limit_hours, grid)
    return (train, val, test), (snaps_tr, snaps_va, snaps_te)


def model_path(cfg: RunConfig, seed: int, k: int) -> Path:
    return cfg.models / f"seed{seed}" / f"event{k}.json"


def load_models(cfg: RunConfig, seed: int, events) -> dict:
    out = {}
    for k in events:
        p = model_path(cfg, seed, k)
        if not p.is_file():
            raise ConfigError(f"model file not found: {p} (run train first)")
        out[k] = StepwiseModel.load(p)
    return out


# ----------------------------------------------------------------- commands


def cmd_simulate(cfg: RunConfig) -> Path:
    out = Path(cfg.data_dir)
    try:
        write_simulation(replace(cfg.synth, seed=cfg.seed), out)
    except OSError as exc:
        raise ConfigError(f"cannot write to {out}: {exc}") from None
    log.info("wrote simulated cohort to %s", out)
    return out


def cmd_train(cfg: RunConfig) -> list:
    """Fit one stepwise model per event and seed; returns the written model paths."""
    ds = load_data(cfg)
    events = resolve_events(cfg, ds)
    written = []
    for seed in cfg.seeds:
        _, (tr, va, _) = prepare(cfg, ds, seed)
        fit_cfg = cfg.fit_for(seed)
        seed_log = {"seed": seed, "n_train_snapshots": len(tr), "n_val_snapshots": len(va),
                    "fit_config": fit_config_to_dict(fit_cfg), "events": {}}
        for k in events:
            model, (log1, log2) = fit_stepwise(tr, va, k, fit_cfg, cfg.horizons, cfg.grid_size,
                                               return_logs=True)
            path = model_path(cfg, seed, k)
            path.parent.mkdir(parents=True, exist_ok=True)
            model.save(path)
            written.append(path)
            seed_log["events"][str(k)] = {"report": model.report, "phase1": log1.to_dict(),
                                          "phase2": log2.to_dict()}
            log.info("seed %d event %d: val c-index phase1 %.4f phase2 %.4f", seed, k,
                     model.report["val_cindex_phase1"], model.report["val_cindex_phase2"])
        write_json(cfg.models / f"seed{seed}" / "train_log.json", seed_log)
    write_json(cfg.models / "run_config.json", cfg.to_dict())
    return written


RESULT_HEADER = ["seed", "event", "t", "variant", "horizon", "n_at_risk", "cindex"]
SUMMARY_HEADER = ["event", "t", "variant", "horizon", "mean", "sd", "n_seeds"]


def _mean(vals) -> float:
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def result_rows(seed: int, evals: list, horizons) -> list:
    """Rows per (t, variant, horizon) followed by the mean-over-t rows."""
    rows = []
    for e in evals:
        for h in horizons:
            rows.append([seed, e.event, e.t, "phase1", h, e.n_at_risk, e.phase1])
            rows.append([seed, e.event, e.t, "phase2", h, e.n_at_risk, e.phase2])
            rows.append([seed, e.event, e.t, "thresholded", h, e.n_at_risk, e.thresholded[h]])
    for h in horizons:
        n = sum(e.n_at_risk for e in evals)
        rows.append([seed, evals[0].event, "mean", "phase1", h, n, _mean([e.phase1 for e in evals])])
        rows.append([seed, evals[0].event, "mean", "phase2", h, n, _mean([e.phase2 for e in evals])])
        rows.append([seed, evals[0].event, "mean", "thresholded", h, n,
                     _mean([e.thresholded[h] for e in evals])])
    return rows


def summarize(rows: list) -> list:
    """Mean and sample sd (ddof=1; 0 for one seed) of the c-index across seeds."""
    cells: dict = {}
    for seed, k, t, variant, h, _, c in rows:
        cells.setdefault((k, t, variant, h), []).append(c)
    out = []
    for (k, t, variant, h), vals in cells.items():
        v = np.asarray([x for x in vals if not math.isnan(x)])
        mean = float(v.mean()) if v.size else math.nan
        sd = float(v.std(ddof=1)) if v.size > 1 else (0.0 if v.size else math.nan)
        out.append([k, t, variant, h, mean, sd, int(v.size)])
    return out


def cmd_evaluate(cfg: RunConfig, split: str = "test") -> dict:
    """Landmark c-indices, subgroup trajectories and the across-seed summary."""
    if split not in ("val", "test"):
        raise ConfigError("split must be 'val' or 'test'")
    ds = load_data(cfg)
    events = resolve_events(cfg, ds)
    horizons = [float(h) for h in cfg.horizons]
    rows, sub_rows = [], []
    for seed in cfg.seeds:
        models = load_models(cfg, seed, events)
        _, (_, va, te) = prepare(cfg, ds, seed)
        snaps = va if split == "val" else te
        for k in events:
            model = models[k]
            missing = [h for h in horizons if h not in model.thresholds.horizons]
            if missing:
                raise ConfigError(f"horizon(s) {missing} absent from the threshold table of "
                                  f"{model_path(cfg, seed, k)}")
            evals = landmark_evaluate(model, snaps, cfg.eval_times, horizons)
            rows.extend(result_rows(seed, evals, horizons))
            for g in subgroup_summary(model, snaps, cfg.subgroup_horizon, cfg.subgroup_t_max):
                for t, cif, contrib, n in zip(g.t, g.mean_cif, g.mean_contribution, g.n):
                    sub_rows.append([seed, k, g.group, t, n, cif, contrib])
    out = Path(cfg.out_dir)
    paths = {"results": out / f"results_{split}.csv", "subgroups": out / f"subgroups_{split}.csv",
             "summary": out / f"summary_{split}.csv"}
    write_csv(paths["results"], RESULT_HEADER, rows)
    write_csv(paths["subgroups"], ["seed", "event", "stratum", "t", "n", "mean_cif_phase2",
                                   "mean_contribution"], sub_rows)
    write_csv(paths["summary"], SUMMARY_HEADER, summarize(rows))
    return paths


def _subject_snapshots(cfg: RunConfig, ds: dm.Dataset, subject_id: str) -> dm.SnapshotSet:
    try:
        subject = ds.by_id(subject_id)
    except KeyError:
        raise ConfigError(f"unknown subject id {subject_id!r}") from None
    one = ds.subset([subject.id])
    snaps = dm.build_snapshots(one, cfg.t_min, cfg.step_hours, cfg.max_t, cfg.gap_limit_hours,
                               eval_grid(cfg))
    if len(snaps) == 0:
        raise ConfigError(f"subject {subject_id!r} has no snapshots")
    return snaps


def cmd_predict(cfg: RunConfig, subject_ids, horizon: float | None = None) -> Path:
    """Switched CIF for every snapshot of the given subjects, all events, seed ``cfg.seed``."""
    ds = load_data(cfg)
    events = resolve_events(cfg, ds)
    models = load_models(cfg, cfg.seed, events)
    horizons = [float(horizon)] if horizon is not None else [float(h) for h in cfg.horizons]
    rows = []
    for sid in subject_ids:
        snaps = _subject_snapshots(cfg, ds, sid)
        for k in events:
            for h in horizons:
                cif, used, contrib = models[k].predict(snaps, h)
                for i in range(len(snaps)):
                    rows.append([sid, k, snaps.t[i], h, cif[i], int(used[i]), contrib[i]])
    path = Path(cfg.out_dir) / "predictions.csv"
    write_csv(path, ["subject_id", "event", "t", "horizon", "cif", "used_phase", "contribution"],
              rows)
    return path


TRAJECTORY_HEADER = ["subject_id", "event", "t", "horizon", "mean_bp", "bp_ref_low",
                     "bp_ref_high", *dm.DOSE_COLUMNS, "cif_phase1", "cif_phase2",
                     "cif_thresholded", "contribution", "used_phase"]


def cmd_export_trajectory(cfg: RunConfig, subject_id: str, event: int,
                          horizon: float | None = None) -> Path:
    """Per-snapshot feature trajectory and CIFs for one subject (one row per t)."""
    ds = load_data(cfg)
    model = load_models(cfg, cfg.seed, [event])[event]
    h = float(cfg.trajectory_horizon if horizon is None else horizon)
    snaps = _subject_snapshots(cfg, ds, subject_id)
    cif, used, contrib = model.predict(snaps, h)
    cif1 = model.phase1.cif(snaps, h)
    cif2 = model.phase2.cif(snaps, h)
    dose_cols = [i for i, n in enumerate(dm.PHASE2_NAMES) if n.endswith("_dose") and not n.startswith("cum_")]
    rows = []
    for i, t in enumerate(snaps.t):
        x2 = snaps.phase2[i]
        rows.append([subject_id, event, t, h, x2[0], *BP_REFERENCE, *x2[dose_cols],
                     cif1[i], cif2[i], cif[i], contrib[i], int(used[i])])
    path = Path(cfg.out_dir) / f"trajectory_{subject_id}_event{event}.csv"
    write_csv(path, TRAJECTORY_HEADER, rows)
    return path


# ---------------------------------------------------------------------- main


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat YAML config file")
    common.add_argument("--seed", type=int, help="base seed (repeats use seed, seed+1, ...)")
    common.add_argument("--repeats", type=int, help="number of seeded repeats")
    common.add_argument("--out", dest="out_dir", help="output directory")
    common.add_argument("--data", dest="data_dir", help="directory with subjects.csv and timeseries.csv")
    common.add_argument("--model-dir", dest="model_dir", help="model directory (default OUT/models)")
    common.add_argument("--filter-years", dest="filter_years", metavar="A..B",
                        help="exclude subjects whose year lies in [A, B]")
    common.add_argument("--event", type=int, action="append", dest="events",
                        help="event code to fit/evaluate (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="stepfg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write a synthetic cohort")
    sub.add_parser("train", parents=[common], help="fit stepwise models")
    ev = sub.add_parser("evaluate", parents=[common], help="landmark and subgroup evaluation")
    ev.add_argument("--split", choices=("val", "test"), default="test")
    pr = sub.add_parser("predict", parents=[common], help="CIF predictions for subjects")
    pr.add_argument("--subject", action="append", required=True, dest="subjects")
    pr.add_argument("--horizon", type=float)
    tr = sub.add_parser("export-trajectory", parents=[common], help="per-subject trajectory CSV")
    tr.add_argument("--subject", required=True)
    tr.add_argument("--horizon", type=float)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: getattr(args, k) for k in ("seed", "repeats", "out_dir", "data_dir",
                                               "model_dir", "filter_years", "events")}
    try:
        cfg = build_config(read_config_file(args.config), overrides)
        if args.command == "simulate":
            print(cmd_simulate(cfg))
        elif args.command == "train":
            for path in cmd_train(cfg):
                print(path)
        elif args.command == "evaluate":
            for path in cmd_evaluate(cfg, args.split).values():
                print(path)
        elif args.command == "predict":
            print(cmd_predict(cfg, args.subjects, args.horizon))
        else:
            if len(cfg.events) != 1:
                raise ConfigError("export-trajectory needs exactly one --event")
            print(cmd_export_trajectory(cfg, args.subject, cfg.events[0], args.horizon))
    except (ConfigError, dm.IngestionError, ValueError, RuntimeError, OSError) as exc:
        print(f"stepfg {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

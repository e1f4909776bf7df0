"""Two-phase (stepwise) Fine-Gray model with a thresholded switch between phases.

Phase 1 sees static features plus elapsed time. Phase 2 adds hemodynamic
features and is trained with the frozen phase-1 score as an offset. The log
ratio of the two fitted subhazards, the incremental contribution, decides per
snapshot and horizon which phase supplies the prediction.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .censoring import StepFunction
from .evaluation import cr_cindex
from .finegray import FitConfig, PhaseModel, fit_phase

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_HORIZONS = (24.0, 48.0, 72.0, 120.0, 240.0)
HAZARD_WINDOW = 1.0
HAZARD_SEARCH = 6


class UndefinedLogHazard(ValueError):
    pass


def windowed_hazard(baseline_cum: StepFunction, h: float, width: float = HAZARD_WINDOW,
                    search: int = HAZARD_SEARCH) -> float:
    """Baseline hazard mass in ``(h - width, h]``.

    If that cell holds no event time, the nearest nonempty cell shifted by
    whole multiples of ``width`` (up to ``search`` cells either way, earlier
    cell first on ties) is used. Returns 0 when nothing is found.
    """
    for j in range(search + 1):
        for shift in ((0,) if j == 0 else (-j, j)):
            hi = h + shift * width
            mass = baseline_cum(hi) - baseline_cum(hi - width)
            if mass > 0:
                return float(mass)
    return 0.0


@dataclass
class ThresholdTable:
    horizons: list
    delta: list
    val_cindex: dict = field(default_factory=dict)  # horizon -> tuned validation c-index

    def __post_init__(self):
        self.horizons = [float(h) for h in self.horizons]
        self.delta = [float(d) for d in self.delta]
        if len(self.horizons) != len(self.delta):
            raise ValueError("one threshold per horizon")
        if any(b <= a for a, b in zip(self.horizons, self.horizons[1:])):
            raise ValueError("horizons must be strictly increasing")
        if any(d < 0 for d in self.delta):
            raise ValueError("thresholds must be nonnegative")

    def at(self, h: float) -> float:
        """Threshold at the nearest tuned horizon at or below ``h`` (first one below the grid)."""
        i = int(np.searchsorted(self.horizons, h, side="right")) - 1
        return self.delta[max(i, 0)]


@dataclass
class StepwiseModel:
    event_k: int
    phase1: PhaseModel
    phase2: PhaseModel
    thresholds: ThresholdTable
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.phase2.offset_source is not self.phase1:
            raise ValueError("phase 2 must use phase 1 as its offset")
        if not self.phase1.event_k == self.phase2.event_k == self.event_k:
            raise ValueError("phases disagree on the event")

    def log_baseline_ratio(self, h: float) -> float:
        lam2 = windowed_hazard(self.phase2.baseline_cum, h)
        lam1 = windowed_hazard(self.phase1.baseline_cum, h)
        if lam1 <= 0 or lam2 <= 0:
            raise UndefinedLogHazard(f"undefined log hazard at h={h} for event {self.event_k}")
        return math.log(lam2) - math.log(lam1)

    def incremental_contribution(self, snaps, h: float, f2=None) -> np.ndarray:
        f2 = self.phase2.net_score(snaps) if f2 is None else f2
        return f2 + self.log_baseline_ratio(h)

    def switched_log_cumhazard(self, snaps, h: float, delta: float | None = None,
                               s1=None, f2=None) -> np.ndarray:
        """Ranking score of the switched predictor (monotone in its CIF)."""
        s1 = self.phase1.score(snaps) if s1 is None else s1
        f2 = self.phase2.net_score(snaps) if f2 is None else f2
        s2 = f2 + s1
        delta = self.thresholds.at(h) if delta is None else delta
        use2 = np.abs(self.incremental_contribution(snaps, h, f2)) > delta
        return np.where(use2, self.phase2.log_cumhazard(snaps, h, s2),
                        self.phase1.log_cumhazard(snaps, h, s1))

    def predict(self, snaps, h: float):
        """Switched CIF, phase used (1 or 2) and incremental contribution per snapshot."""
        s1 = self.phase1.score(snaps)
        f2 = self.phase2.net_score(snaps)
        s2 = f2 + s1
        contrib = self.incremental_contribution(snaps, h, f2)
        use2 = np.abs(contrib) > self.thresholds.at(h)
        cif = np.where(use2, self.phase2.cif(snaps, h, s2), self.phase1.cif(snaps, h, s1))
        return cif, np.where(use2, 2, 1), contrib

    def to_dict(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "event_k": self.event_k,
            "phase1": self.phase1.to_dict(),
            "phase2": self.phase2.to_dict(offset_ref="phase1"),
            "thresholds": {
                "horizons": self.thresholds.horizons,
                "delta": self.thresholds.delta,
                "val_cindex": {repr(h): v for h, v in self.thresholds.val_cindex.items()},
            },
            "report": self.report,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepwiseModel":
        if d.get("version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported stepwise-model schema version {d.get('version')!r}")
        p1 = PhaseModel.from_dict(d["phase1"])
        if d["phase2"].get("offset_source") != "phase1":
            raise ValueError("phase 2 must reference phase 1 as its offset")
        p2 = PhaseModel.from_dict(d["phase2"], offset_source=p1)
        th = d["thresholds"]
        table = ThresholdTable(th["horizons"], th["delta"],
                               {float(h): v for h, v in th.get("val_cindex", {}).items()})
        return cls(d["event_k"], p1, p2, table, d.get("report", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "StepwiseModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def incremental_contribution(model: StepwiseModel, snapshot, h: float) -> float:
    from .data_model import SnapshotSet

    one = SnapshotSet.from_snapshots([snapshot])
    return float(model.incremental_contribution(one, h)[0])


def predict(model: StepwiseModel, snapshot, h: float):
    """``(cif, used_phase, contribution)`` for one snapshot."""
    from .data_model import SnapshotSet

    one = SnapshotSet.from_snapshots([snapshot])
    cif, used, contrib = model.predict(one, h)
    return float(cif[0]), int(used[0]), float(contrib[0])


class _PairCache:
    """Comparable-pair masks per landmark time, reused across threshold candidates."""

    def __init__(self, snaps, k, eval_times):
        self.groups = []
        for t in eval_times:
            idx = np.nonzero(np.isclose(snaps.t, t))[0]
            if idx.size < 2:
                continue
            y, d = snaps.residual_time[idx], snaps.event[idx]
            comp = (d[:, None] == k) & ((y[:, None] < y[None, :]) | (d[None, :] != k))
            np.fill_diagonal(comp, False)
            if comp.any():
                self.groups.append((idx, comp, int(comp.sum())))

    def mean_cindex(self, scores) -> float:
        vals = []
        for idx, comp, den in self.groups:
            s = scores[idx]
            wins = (s[:, None] > s[None, :]) + 0.5 * (s[:, None] == s[None, :])
            vals.append(float(wins[comp].sum()) / den)
        return float(np.mean(vals)) if vals else math.nan


def tune_threshold(model: StepwiseModel, val, horizons=DEFAULT_HORIZONS, grid_size: int = 100,
                   eval_times=(6, 12, 24, 48)) -> ThresholdTable:
    """Per-horizon grid search of the switching threshold on validation data.

    Candidates are ``grid_size`` evenly spaced values from 0 to ``max |I|``;
    the one with the best mean validation CR c-index over ``eval_times`` wins,
    ties going to the smallest threshold. Horizons where either baseline
    hazard is zero are left out of the table (with a warning).
    """
    if len(val) == 0:
        raise ValueError("empty validation set")
    k = model.event_k
    s1 = model.phase1.score(val)
    f2 = model.phase2.net_score(val)
    s2 = f2 + s1
    pairs = _PairCache(val, k, eval_times)
    kept, deltas, tuned = [], [], {}
    for h in horizons:
        try:
            model.log_baseline_ratio(h)
        except UndefinedLogHazard as exc:
            log.warning("skipping horizon %g: %s", h, exc)
            continue
        contrib = np.abs(model.incremental_contribution(val, h, f2))
        r1 = model.phase1.log_cumhazard(val, h, s1)
        r2 = model.phase2.log_cumhazard(val, h, s2)
        best_delta, best_c = 0.0, -math.inf
        for delta in np.linspace(0.0, float(contrib.max()), grid_size):
            c = pairs.mean_cindex(np.where(contrib > delta, r2, r1))
            c = -math.inf if math.isnan(c) else c
            if c > best_c:
                best_delta, best_c = float(delta), c
        kept.append(h)
        deltas.append(best_delta)
        tuned[float(h)] = best_c if math.isfinite(best_c) else math.nan
    if not kept:
        raise UndefinedLogHazard(f"log hazard undefined at every horizon for event {k}")
    return ThresholdTable(kept, deltas, tuned)


def fit_stepwise(train, val, k: int, cfg: FitConfig = FitConfig(), horizons=DEFAULT_HORIZONS,
                 grid_size: int = 100, return_logs: bool = False):
    """Fit phase 1, freeze it, fit phase 2 on top, then tune thresholds on ``val``."""
    from dataclasses import replace

    phase1, log1 = fit_phase(train, val, k, "phase1", None, cfg, return_log=True)
    phase2, log2 = fit_phase(train, val, k, "phase1+2", phase1, replace(cfg, seed=cfg.seed + 1),
                             return_log=True)
    placeholder = ThresholdTable(list(horizons), [0.0] * len(horizons))
    model = StepwiseModel(k, phase1, phase2, placeholder)
    model.thresholds = tune_threshold(model, val, horizons, grid_size, cfg.eval_times)

    from .evaluation import mean_cindex_over_times

    model.report = {
        "val_cindex_phase1": mean_cindex_over_times(phase1.score(val), val, k, cfg.eval_times),
        "val_cindex_phase2": mean_cindex_over_times(phase2.score(val), val, k, cfg.eval_times),
        "val_cindex_tuned": {repr(h): v for h, v in model.thresholds.val_cindex.items()},
        "selected_lr": [log1.selected_lr, log2.selected_lr],
        "selected_epoch": [log1.selected_epoch, log2.selected_epoch],
    }
    return (model, (log1, log2)) if return_logs else model

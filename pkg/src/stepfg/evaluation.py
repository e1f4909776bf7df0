"""Discrimination metrics and landmark/subgroup analytics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_CHUNK = 2048


def _concordance(scores, times, comparable_fn) -> float:
    scores = np.asarray(scores, dtype=float)
    times = np.asarray(times, dtype=float)
    if scores.shape != times.shape:
        raise ValueError("scores and labels must have the same length")
    num = 0.0
    den = 0
    for start in range(0, scores.size, _CHUNK):
        rows = slice(start, start + _CHUNK)
        comp = comparable_fn(rows)
        if not comp.any():
            continue
        si = scores[rows, None]
        wins = (si > scores[None, :]) + 0.5 * (si == scores[None, :])
        num += float(wins[comp].sum())
        den += int(comp.sum())
    return num / den if den else math.nan


def cr_cindex(scores, times, events, k: int, tau: float | None = None) -> float:
    """Competing-risks concordance.

    A pair ``(i, j)`` is comparable when ``D_i = k`` and either
    ``Y_i < Y_j`` or ``D_j != k``; it is concordant when ``score_i > score_j``
    and score ties count one half. Returns NaN when no pair is comparable.
    ``tau`` keeps only pairs whose anchor time ``Y_i`` is at most ``tau``.
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events)
    n = times.size
    anchor = events == k
    if tau is not None:
        anchor &= times <= tau

    def comparable(rows):
        idx = np.arange(n)[rows]
        comp = (times[rows, None] < times[None, :]) | (events[None, :] != k)
        comp &= anchor[rows, None]
        comp &= idx[:, None] != np.arange(n)[None, :]
        return comp

    return _concordance(scores, times, comparable)


def harrell_cindex(scores, times, events, k: int, tau: float | None = None) -> float:
    """Harrell's concordance with competing events recoded as censoring."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events)
    anchor = events == k
    if tau is not None:
        anchor &= times <= tau

    def comparable(rows):
        return anchor[rows, None] & (times[rows, None] < times[None, :])

    return _concordance(scores, times, comparable)


def mean_cindex_over_times(scores, snapshots, k: int, eval_times) -> float:
    """Average CR c-index over landmark times, skipping undefined ones (NaN if all are)."""
    vals = []
    for t in eval_times:
        mask = np.isclose(snapshots.t, t)
        if mask.sum() < 2:
            continue
        c = cr_cindex(scores[mask], snapshots.residual_time[mask], snapshots.event[mask], k)
        if not math.isnan(c):
            vals.append(c)
    return float(np.mean(vals)) if vals else math.nan


@dataclass
class LandmarkEval:
    event: int
    t: float
    n_at_risk: int
    phase1: float
    phase2: float
    thresholded: dict = field(default_factory=dict)  # horizon -> c-index

    @property
    def thresholded_mean(self) -> float:
        vals = [v for v in self.thresholded.values() if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan


def landmark_evaluate(model, test, times=(6, 12, 24, 48), horizons=None, tau=None) -> list:
    """CR c-index per landmark time for phase 1, phase 2 and the switched predictor.

    Only snapshots taken at ``t`` enter, and those exist only for subjects still
    event-free and under observation at ``t``. The switched predictor is ranked
    by its predicted CIF at each horizon.
    """
    k = model.event_k
    horizons = list(model.thresholds.horizons if horizons is None else horizons)
    out = []
    for t in times:
        snap = test.at_time(t)
        n = len(snap)
        if n == 0:
            out.append(LandmarkEval(k, float(t), 0, math.nan, math.nan,
                                    {float(h): math.nan for h in horizons}))
            continue
        y, d = snap.residual_time, snap.event
        s1 = model.phase1.score(snap)
        f2 = model.phase2.net_score(snap)
        s2 = f2 + s1
        row = LandmarkEval(k, float(t), n, cr_cindex(s1, y, d, k, tau), cr_cindex(s2, y, d, k, tau))
        for h in horizons:
            ranking = model.switched_log_cumhazard(snap, h, s1=s1, f2=f2)
            row.thresholded[float(h)] = cr_cindex(ranking, y, d, k, tau)
        out.append(row)
    return out


@dataclass
class SubgroupSummary:
    group: int
    t: list
    mean_cif: list
    mean_contribution: list
    n: list


def subgroup_summary(model, snapshots, h: float = 240.0, t_max: float = 72.0) -> list:
    """Per-stratum, per-landmark mean phase-2 CIF at ``h`` and mean incremental contribution."""
    keep = snapshots.t <= t_max
    snaps = snapshots.subset(keep)
    if len(snaps) == 0:
        return []
    cif = model.phase2.cif(snaps, h)
    contrib = model.incremental_contribution(snaps, h)
    out = []
    for g in sorted(set(snaps.stratum.tolist())):
        in_group = snaps.stratum == g
        ts, cifs, contribs, ns = [], [], [], []
        for t in sorted(set(snaps.t[in_group].tolist())):
            cell = in_group & (snaps.t == t)
            ts.append(float(t))
            cifs.append(float(cif[cell].mean()))
            contribs.append(float(contrib[cell].mean()))
            ns.append(int(cell.sum()))
        out.append(SubgroupSummary(int(g), ts, cifs, contribs, ns))
    return out

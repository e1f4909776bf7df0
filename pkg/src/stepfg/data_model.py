"""Subjects, snapshots and CSV ingestion.

A ``Subject`` is one patient: static covariates, an hourly hemodynamic
series, the observed time ``y_hours`` and the event code. A ``Snapshot`` is
the pooled training instance built from a subject at prediction time ``t``.
Timeseries rows are labelled by the hour at which their 1-hour window ends.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

SERIES_COLUMNS = ("mean_bp", "min_bp", "max_bp", "dop_dose", "epi_dose", "nor_dose", "vas_dose",
                  "phe_dose")
DOSE_COLUMNS = SERIES_COLUMNS[3:]
TIMESERIES_COLUMNS = ("subject_id", "hour", *SERIES_COLUMNS)
SUBJECT_REQUIRED = ("subject_id", "y_hours", "event", "stratum")
META_COLUMNS = ("year",)
TIME_FEATURE = "t_since_arrest_hr"
PHASE2_NAMES = (
    "mean_bp", "min_bp", "max_bp", "bp_diff",
    "DOP_dose", "EPI_dose", "NOR_dose", "VAS_dose", "PHE_dose",
    "cum_DOP_dose", "cum_EPI_dose", "cum_NOR_dose", "cum_VAS_dose", "cum_PHE_dose",
)
DEFAULT_N_EVENTS = 3


class IngestionError(ValueError):
    """Malformed input file; the message names the offending row and column."""


@dataclass(frozen=True)
class TimePoint:
    hour: int
    mean_bp: float = math.nan
    min_bp: float = math.nan
    max_bp: float = math.nan
    dop_dose: float = math.nan
    epi_dose: float = math.nan
    nor_dose: float = math.nan
    vas_dose: float = math.nan
    phe_dose: float = math.nan


@dataclass
class Subject:
    id: str
    y_hours: float
    event: int
    static_features: np.ndarray
    stratum: int = 0
    hours: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    values: np.ndarray = field(default_factory=lambda: np.zeros((0, len(SERIES_COLUMNS))))
    year: int | None = None

    def __post_init__(self):
        if not self.y_hours > 0:
            raise ValueError(f"subject {self.id}: y_hours must be positive")
        self.hours = np.asarray(self.hours, dtype=int)
        self.values = np.asarray(self.values, dtype=float).reshape(-1, len(SERIES_COLUMNS))
        if self.hours.size and (np.any(np.diff(self.hours) <= 0) or self.hours[-1] >= self.y_hours):
            raise ValueError(f"subject {self.id}: series hours must increase and stay below y_hours")

    @property
    def series(self) -> list[TimePoint]:
        return [TimePoint(int(h), *map(float, row)) for h, row in zip(self.hours, self.values)]


@dataclass
class Dataset:
    subjects: list
    feature_names: list
    registry: list
    n_events: int = DEFAULT_N_EVENTS

    def __post_init__(self):
        dims = {len(s.static_features) for s in self.subjects}
        if len(dims) > 1:
            raise ValueError("subjects disagree on static feature dimension")

    def __len__(self):
        return len(self.subjects)

    def by_id(self, subject_id: str) -> Subject:
        for s in self.subjects:
            if s.id == subject_id:
                return s
        raise KeyError(f"unknown subject id {subject_id!r}")

    def subset(self, ids) -> "Dataset":
        ids = set(ids)
        return Dataset([s for s in self.subjects if s.id in ids], self.feature_names,
                       self.registry, self.n_events)


@dataclass(frozen=True)
class Snapshot:
    subject_id: str
    t: float
    phase1: np.ndarray
    phase2: np.ndarray
    residual_time: float
    event: int
    stratum: int


def _as_matrix(a, n: int, names) -> np.ndarray:
    width = len(names) if names else (-1 if n else 0)
    return np.asarray(a, dtype=float).reshape(n, width)


@dataclass
class SnapshotSet:
    """Column-oriented collection of snapshots."""

    subject_id: np.ndarray
    t: np.ndarray
    phase1: np.ndarray
    phase2: np.ndarray
    residual_time: np.ndarray
    event: np.ndarray
    stratum: np.ndarray
    phase1_names: list
    phase2_names: list = field(default_factory=lambda: list(PHASE2_NAMES))
    n_events: int = DEFAULT_N_EVENTS

    def __post_init__(self):
        self.subject_id = np.asarray(self.subject_id, dtype=object)
        self.t = np.asarray(self.t, dtype=float)
        n = self.t.size
        self.phase1 = _as_matrix(self.phase1, n, self.phase1_names)
        self.phase2 = _as_matrix(self.phase2, n, self.phase2_names)
        self.residual_time = np.asarray(self.residual_time, dtype=float)
        self.event = np.asarray(self.event, dtype=int)
        self.stratum = np.asarray(self.stratum, dtype=int)
        if np.any(self.residual_time <= 0):
            raise ValueError("snapshot residual times must be positive")

    def __len__(self):
        return self.t.size

    def __getitem__(self, i) -> Snapshot:
        return Snapshot(self.subject_id[i], float(self.t[i]), self.phase1[i], self.phase2[i],
                        float(self.residual_time[i]), int(self.event[i]), int(self.stratum[i]))

    def subset(self, mask) -> "SnapshotSet":
        return SnapshotSet(self.subject_id[mask], self.t[mask], self.phase1[mask],
                           self.phase2[mask], self.residual_time[mask], self.event[mask],
                           self.stratum[mask], self.phase1_names, self.phase2_names, self.n_events)

    def at_time(self, t: float) -> "SnapshotSet":
        return self.subset(np.isclose(self.t, t))

    @classmethod
    def from_snapshots(cls, snaps: list, phase1_names=(), n_events=DEFAULT_N_EVENTS) -> "SnapshotSet":
        return cls([s.subject_id for s in snaps], [s.t for s in snaps],
                   [s.phase1 for s in snaps], [s.phase2 for s in snaps],
                   [s.residual_time for s in snaps], [s.event for s in snaps],
                   [s.stratum for s in snaps], list(phase1_names), n_events=n_events)

    @classmethod
    def concat(cls, parts: list) -> "SnapshotSet":
        first = parts[0]
        return cls(*(np.concatenate([getattr(p, a) for p in parts]) for a in
                     ("subject_id", "t", "phase1", "phase2", "residual_time", "event", "stratum")),
                   first.phase1_names, first.phase2_names, first.n_events)


# ---------------------------------------------------------------- ingestion


def _parse_float(value: str, row: int, column: str, path) -> float:
    try:
        out = float(value)
    except ValueError:
        raise IngestionError(f"{path}: row {row}, column {column!r}: non-numeric value {value!r}")
    if math.isnan(out):
        raise IngestionError(f"{path}: row {row}, column {column!r}: NaN is not allowed")
    return out


def _is_number(value: str) -> bool:
    try:
        float(value)
    except ValueError:
        return False
    return True


def build_registry(frame: pd.DataFrame, columns) -> list:
    """Classify static columns as numeric or categorical (with sorted categories)."""
    registry = []
    for col in columns:
        vals = frame[col].tolist()
        if vals and all(v != "" and _is_number(v) for v in vals):
            registry.append({"name": col, "kind": "numeric"})
        else:
            registry.append({"name": col, "kind": "categorical", "categories": sorted(set(vals))})
    return registry


def registry_feature_names(registry) -> list:
    names = []
    for entry in registry:
        if entry["kind"] == "numeric":
            names.append(entry["name"])
        else:
            names.extend(f"{entry['name']}={c}" for c in entry["categories"])
    return names


def encode_static(record: dict, registry, row: int = 0, path="subjects") -> np.ndarray:
    """Encode one subjects row; unseen categories become an all-zeros block."""
    out = []
    for entry in registry:
        col = entry["name"]
        if col not in record:
            raise IngestionError(f"{path}: missing column {col!r}")
        value = record[col]
        if entry["kind"] == "numeric":
            out.append(_parse_float(value, row, col, path))
        else:
            out.extend(1.0 if value == c else 0.0 for c in entry["categories"])
    return np.asarray(out, dtype=float)


def _read_csv(path, columns=None) -> pd.DataFrame:
    """All cells as strings; a zero-byte file reads as an empty frame with ``columns``."""
    if columns is not None and Path(path).stat().st_size == 0:
        return pd.DataFrame(columns=list(columns), dtype=str)
    return pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")


def load_dataset(subjects_path, timeseries_path, registry=None, n_events: int = DEFAULT_N_EVENTS,
                 exclude_years: tuple | None = None) -> Dataset:
    """Read ``subjects.csv`` and ``timeseries.csv`` into a ``Dataset``.

    Pass ``registry`` from a previously loaded dataset to encode categorical
    columns identically. ``exclude_years=(a, b)`` drops subjects whose
    ``year`` lies in ``[a, b]`` (requires a ``year`` column).
    """
    subjects_path, timeseries_path = Path(subjects_path), Path(timeseries_path)
    sub = _read_csv(subjects_path)
    for col in SUBJECT_REQUIRED:
        if col not in sub.columns:
            raise IngestionError(f"{subjects_path}: missing column {col!r}")
    if exclude_years is not None and "year" not in sub.columns:
        raise IngestionError(f"{subjects_path}: year filter requested but no 'year' column")
    static_cols = [c for c in sub.columns if c not in SUBJECT_REQUIRED and c not in META_COLUMNS]
    if registry is None:
        registry = build_registry(sub, static_cols)

    subjects, seen = [], {}
    for i, rec in enumerate(sub.to_dict("records")):
        row = i + 2
        sid = rec["subject_id"]
        if sid == "":
            raise IngestionError(f"{subjects_path}: row {row}, column 'subject_id': empty id")
        if sid in seen:
            raise IngestionError(f"{subjects_path}: row {row}, column 'subject_id': duplicate {sid!r}")
        y = _parse_float(rec["y_hours"], row, "y_hours", subjects_path)
        if y <= 0:
            raise IngestionError(f"{subjects_path}: row {row}, column 'y_hours': must be positive")
        ev = _parse_float(rec["event"], row, "event", subjects_path)
        if ev != int(ev) or not 0 <= ev <= n_events:
            raise IngestionError(f"{subjects_path}: row {row}, column 'event': unknown event code "
                                 f"{rec['event']!r}")
        stratum = _parse_float(rec["stratum"], row, "stratum", subjects_path)
        year = None
        if "year" in rec and rec["year"] != "":
            year = int(_parse_float(rec["year"], row, "year", subjects_path))
        x = encode_static(rec, registry, row, subjects_path)
        seen[sid] = len(subjects)
        subjects.append(Subject(sid, y, int(ev), x, int(stratum), year=year))

    ts = _read_csv(timeseries_path, TIMESERIES_COLUMNS)
    for col in TIMESERIES_COLUMNS:
        if col not in ts.columns:
            raise IngestionError(f"{timeseries_path}: missing column {col!r}")
    rows_by_subject: dict = {}
    for i, rec in enumerate(ts.to_dict("records")):
        row = i + 2
        sid = rec["subject_id"]
        if sid not in seen:
            raise IngestionError(f"{timeseries_path}: row {row}, column 'subject_id': unknown "
                                 f"subject {sid!r}")
        hour = _parse_float(rec["hour"], row, "hour", timeseries_path)
        if hour != int(hour) or hour < 0:
            raise IngestionError(f"{timeseries_path}: row {row}, column 'hour': must be a "
                                 "nonnegative integer")
        subject = subjects[seen[sid]]
        if hour >= subject.y_hours:
            raise IngestionError(f"{timeseries_path}: row {row}, column 'hour': hour {int(hour)} "
                                 f"is not before y_hours={subject.y_hours}")
        vals = [math.nan if rec[c] == "" else _parse_float(rec[c], row, c, timeseries_path)
                for c in SERIES_COLUMNS]
        mean, lo, hi = vals[:3]
        if not (math.isnan(mean) or math.isnan(lo) or math.isnan(hi)) and not lo <= mean <= hi:
            raise IngestionError(f"{timeseries_path}: row {row}, column 'mean_bp': requires "
                                 "min_bp <= mean_bp <= max_bp")
        if any(v < 0 for v in vals[3:] if not math.isnan(v)):
            raise IngestionError(f"{timeseries_path}: row {row}: negative dose")
        bucket = rows_by_subject.setdefault(sid, {})
        if int(hour) in bucket:
            raise IngestionError(f"{timeseries_path}: row {row}, column 'hour': duplicate "
                                 f"(subject_id, hour) = ({sid!r}, {int(hour)})")
        bucket[int(hour)] = vals

    for sid, bucket in rows_by_subject.items():
        subject = subjects[seen[sid]]
        hours = sorted(bucket)
        subject.hours = np.asarray(hours, dtype=int)
        subject.values = np.asarray([bucket[h] for h in hours], dtype=float)

    if exclude_years is not None:
        lo, hi = exclude_years
        subjects = [s for s in subjects if s.year is None or not lo <= s.year <= hi]
    return Dataset(subjects, registry_feature_names(registry), registry, n_events)


def write_dataset(dataset: Dataset, subjects_path, timeseries_path, static_columns=None,
                  static_rows=None) -> None:
    """Write a dataset in the CSV schema.

    ``static_rows`` (one dict per subject) overrides the encoded static vector,
    which lets generators emit raw categorical strings.
    """
    import csv

    names = static_columns or dataset.feature_names
    with open(subjects_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "y_hours", "event", "stratum", *names])
        for i, s in enumerate(dataset.subjects):
            static = ([static_rows[i][c] for c in names] if static_rows is not None
                      else [repr(float(v)) for v in s.static_features])
            w.writerow([s.id, repr(float(s.y_hours)), s.event, s.stratum, *static])
    with open(timeseries_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMESERIES_COLUMNS)
        for s in dataset.subjects:
            for h, row in zip(s.hours, s.values):
                w.writerow([s.id, int(h), *("" if math.isnan(v) else repr(float(v)) for v in row)])


# ---------------------------------------------------------------- snapshots


def _locf(values: np.ndarray) -> np.ndarray:
    """Forward-fill NaNs along a 1-d array (leading NaNs stay NaN)."""
    idx = np.where(np.isnan(values), -1, np.arange(values.size))
    idx = np.maximum.accumulate(idx)
    out = np.where(idx >= 0, values[np.maximum(idx, 0)], np.nan)
    return out


def snapshot_times(subject: Subject, t_min: float, step_hours: float, max_t: float,
                   gap_limit_hours: float, times=None) -> np.ndarray:
    """Prediction times at which ``subject`` yields a usable snapshot."""
    if times is None:
        end = min(subject.y_hours, max_t)
        n = max(0, int(math.ceil((end - t_min) / step_hours)))
        grid = t_min + step_hours * np.arange(n + 1)
    else:
        grid = np.asarray(sorted(times), dtype=float)
    grid = grid[(grid >= 0) & (grid < subject.y_hours) & (grid < max_t)]

    hours, vals = subject.hours, subject.values
    bp_hours = hours[~np.isnan(vals[:, 0])]
    if bp_hours.size == 0:
        return grid[:0]
    obs_hours = hours[~np.all(np.isnan(vals), axis=1)]
    keep = np.floor(grid) >= bp_hours[0]

    gaps = np.nonzero(np.diff(obs_hours) > gap_limit_hours)[0]
    if gaps.size:
        keep &= grid < obs_hours[gaps[0]] + 1
    # trailing stretch without observations
    last_idx = np.searchsorted(obs_hours, np.floor(grid), side="right") - 1
    last_obs = obs_hours[np.maximum(last_idx, 0)]
    keep &= (last_idx >= 0) & (grid - last_obs <= gap_limit_hours)
    return grid[keep]


def phase2_features(subject: Subject, t: float) -> np.ndarray:
    """Hemodynamic summary of the window ending at hour ``floor(t)``."""
    tt = int(math.floor(t))
    horizon = tt + 1
    dense = np.full((horizon, len(SERIES_COLUMNS)), np.nan)
    mask = subject.hours <= tt
    dense[subject.hours[mask]] = subject.values[mask]
    mean_locf = _locf(dense[:, 0])
    mean_bp = mean_locf[tt]
    min_bp = dense[tt, 1] if not np.isnan(dense[tt, 1]) else mean_bp
    max_bp = dense[tt, 2] if not np.isnan(dense[tt, 2]) else mean_bp
    prev = mean_locf[tt - 1] if tt >= 1 else np.nan
    bp_diff = 0.0 if np.isnan(prev) else mean_bp - prev
    doses = np.nan_to_num(dense[:, 3:], nan=0.0)
    return np.concatenate([[mean_bp, min_bp, max_bp, bp_diff], doses[tt], doses.sum(axis=0)])


def build_snapshots(dataset: Dataset, t_min: float = 6.0, step_hours: float = 5.0,
                    max_t: float = 240.0, gap_limit_hours: float = 5.0,
                    times=None) -> SnapshotSet:
    """Pool per-subject snapshots on the grid ``t_min, t_min + step, ...``.

    ``times`` replaces the regular grid with an explicit list of prediction
    times (used for hourly evaluation sets).
    """
    if t_min < 0 or step_hours <= 0:
        raise ValueError("need t_min >= 0 and step_hours > 0")
    cols = {k: [] for k in ("sid", "t", "p1", "p2", "res", "ev", "st")}
    for s in dataset.subjects:
        for t in snapshot_times(s, t_min, step_hours, max_t, gap_limit_hours, times):
            cols["sid"].append(s.id)
            cols["t"].append(float(t))
            cols["p1"].append(np.append(s.static_features, t))
            cols["p2"].append(phase2_features(s, t))
            cols["res"].append(s.y_hours - t)
            cols["ev"].append(s.event)
            cols["st"].append(s.stratum)
    d1 = len(dataset.feature_names) + 1
    return SnapshotSet(
        np.asarray(cols["sid"], dtype=object), np.asarray(cols["t"]),
        np.asarray(cols["p1"]).reshape(-1, d1), np.asarray(cols["p2"]).reshape(-1, len(PHASE2_NAMES)),
        np.asarray(cols["res"]), np.asarray(cols["ev"], dtype=int), np.asarray(cols["st"], dtype=int),
        [*dataset.feature_names, TIME_FEATURE], list(PHASE2_NAMES), dataset.n_events,
    )


def static_snapshots(dataset: Dataset, t: float = 0.0) -> SnapshotSet:
    """One snapshot per subject at time ``t`` with no hemodynamic data (zeros)."""
    subs = [s for s in dataset.subjects if s.y_hours > t]
    d1 = len(dataset.feature_names) + 1
    return SnapshotSet(
        np.asarray([s.id for s in subs], dtype=object), np.full(len(subs), float(t)),
        np.asarray([np.append(s.static_features, t) for s in subs]).reshape(-1, d1),
        np.zeros((len(subs), len(PHASE2_NAMES))),
        np.asarray([s.y_hours - t for s in subs]), np.asarray([s.event for s in subs], dtype=int),
        np.asarray([s.stratum for s in subs], dtype=int),
        [*dataset.feature_names, TIME_FEATURE], list(PHASE2_NAMES), dataset.n_events,
    )


# ---------------------------------------------------------------- splitting


def _allocate(n: int, fractions) -> list:
    """Largest-remainder rounding of ``n * fractions`` (each count within 1 of exact)."""
    exact = [n * f for f in fractions]
    counts = [int(math.floor(e)) for e in exact]
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_stratified(dataset: Dataset, fractions=(0.64, 0.16, 0.20), seed: int = 0):
    """Subject-level train/validation/test split, stratified by ``Subject.stratum``."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ValueError("fractions must be three positive numbers summing to 1")
    rng = np.random.default_rng(seed)
    strata: dict = {}
    for s in dataset.subjects:
        strata.setdefault(s.stratum, []).append(s.id)
    parts = ([], [], [])
    for stratum in sorted(strata):
        ids = sorted(strata[stratum])
        if len(ids) < 3:
            warnings.warn(f"stratum {stratum} has {len(ids)} subject(s); assigning to train")
            parts[0].extend(ids)
            continue
        perm = [ids[i] for i in rng.permutation(len(ids))]
        n_train, n_val, _ = _allocate(len(ids), fractions)
        parts[0].extend(perm[:n_train])
        parts[1].extend(perm[n_train:n_train + n_val])
        parts[2].extend(perm[n_train + n_val:])
    return tuple(dataset.subset(p) for p in parts)

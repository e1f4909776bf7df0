"""Censoring survival estimation and inverse-probability-of-censoring weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_FLOOR = 1e-6


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous piecewise-constant function of time.

    ``values[i]`` holds on ``[knots[i], knots[i + 1])``; the last value extends
    to infinity and ``value_before_first_knot`` holds on ``[0, knots[0])``.
    """

    knots: np.ndarray
    values: np.ndarray
    value_before_first_knot: float = 0.0

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float).reshape(-1)
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if knots.shape != values.shape:
            raise ValueError("knots and values must have the same length")
        if knots.size > 1 and np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        knots.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "value_before_first_knot", float(self.value_before_first_knot))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.knots, t, side="right") - 1
        table = np.concatenate([[self.value_before_first_knot], self.values])
        out = table[idx + 1]
        return out if out.ndim else float(out)

    def increments(self) -> np.ndarray:
        """Jump sizes at each knot."""
        prev = np.concatenate([[self.value_before_first_knot], self.values[:-1]])
        return self.values - prev

    def to_dict(self) -> dict:
        return {
            "knots": [float(v) for v in self.knots],
            "values": [float(v) for v in self.values],
            "value_before_first_knot": self.value_before_first_knot,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepFunction":
        return cls(np.asarray(d["knots"], dtype=float), np.asarray(d["values"], dtype=float),
                   d["value_before_first_knot"])


def censoring_survival(times, events) -> StepFunction:
    """Reverse Kaplan-Meier estimate of ``G(h) = P(C > h)``.

    Censorings (``event == 0``) play the role of events; every other code is
    treated as censored for this purpose. At a time shared by an event and a
    censoring, the event leaves the risk set first, so the censored subject
    is counted at risk only with the subjects still remaining.
    """
    times = np.asarray(times, dtype=float).reshape(-1)
    events = np.asarray(events).reshape(-1)
    if times.size == 0:
        raise ValueError("censoring_survival needs at least one label")
    if times.shape != events.shape:
        raise ValueError("times and events must have the same length")
    if np.any(times <= 0):
        raise ValueError("observed times must be positive")

    uniq, inverse = np.unique(times, return_inverse=True)
    n_cens = np.bincount(inverse, weights=(events == 0).astype(float), minlength=uniq.size)
    n_event = np.bincount(inverse, weights=(events != 0).astype(float), minlength=uniq.size)
    n_total = np.bincount(inverse, minlength=uniq.size).astype(float)
    # at risk before time u: everyone with time >= u
    at_risk = n_total[::-1].cumsum()[::-1]
    # events at the same time leave first
    at_risk_cens = at_risk - n_event

    keep = n_cens > 0
    if not keep.any():
        return StepFunction(np.array([]), np.array([]), 1.0)
    # (r - c) / r rounds once, so simple fixtures come out exact
    factors = (at_risk_cens[keep] - n_cens[keep]) / at_risk_cens[keep]
    return StepFunction(uniq[keep], np.cumprod(factors), 1.0)


def ipcw_weight(G: StepFunction, y_i: float, y_j: float, d_j: int, k: int,
                floor: float = DEFAULT_FLOOR, censored_in_risk_set: bool = False) -> float:
    """Weight of subject ``j`` in the risk set of event-``k`` subject ``i``."""
    if y_j >= y_i:
        return 1.0
    if d_j == k:
        return 0.0
    if d_j == 0 and not censored_in_risk_set:
        return 0.0
    return G(y_i) / max(G(y_j), floor)


def ipcw_weight_matrix(G: StepFunction, times, events, k: int, floor: float = DEFAULT_FLOOR,
                       censored_in_risk_set: bool = False) -> np.ndarray:
    """Dense ``W[i, j] = w_j(Y_i)``; O(n^2) memory, meant for small batches and checks."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events)
    g = np.asarray(G(times), dtype=float)
    later = times[None, :] >= times[:, None]
    eligible = events != k
    if not censored_in_risk_set:
        eligible &= events != 0
    ratio = g[:, None] / np.maximum(g[None, :], floor)
    return np.where(later, 1.0, np.where(eligible[None, :], ratio, 0.0))

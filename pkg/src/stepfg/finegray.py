"""Single-phase neural Fine-Gray model for one event type.

Training maximizes the IPCW-weighted partial likelihood over mini-batches,
early-stops on validation loss, keeps the checkpoint with the best mean
validation CR c-index, and finishes with an IPCW Breslow baseline.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import risk_net
from .censoring import DEFAULT_FLOOR, StepFunction, censoring_survival
from .evaluation import mean_cindex_over_times

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FEATURE_SLICES = ("phase1", "phase1+2")


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    learning_rates: tuple = (5e-4, 1e-4, 5e-5)
    weight_decay: float = 0.001
    max_iterations: int = 1000
    early_stop_patience: int = 20
    batch_size: int | None = 128  # None: full batch
    eval_times: tuple = (6, 12, 24, 48)
    hidden_dims: tuple = (64, 32)
    dropout_rate: float = 0.2
    seed: int = 0
    checkpoint_metric: str = "cindex"  # or "loss"
    censored_in_risk_set: bool = False
    sample_one_per_subject: bool = False
    ipcw_floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        object.__setattr__(self, "learning_rates", tuple(float(v) for v in self.learning_rates))
        object.__setattr__(self, "eval_times", tuple(float(v) for v in self.eval_times))
        object.__setattr__(self, "hidden_dims", tuple(int(v) for v in self.hidden_dims))
        if not self.learning_rates or any(v <= 0 for v in self.learning_rates):
            raise ValueError("learning rates must be positive")
        if self.max_iterations < 1 or self.early_stop_patience < 1:
            raise ValueError("max_iterations and early_stop_patience must be positive")
        if self.batch_size is not None and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 or None")
        if self.checkpoint_metric not in ("cindex", "loss"):
            raise ValueError("checkpoint_metric must be 'cindex' or 'loss'")


# ------------------------------------------------------------ loss & Breslow


def _risk_set_sums(s, times, events, k, G, floor, censored_in_risk_set):
    """Shared pieces of the weighted risk-set sums, computed in O(n log n).

    For each subject ``i`` the (max-shifted) denominator is
    ``sum_{Y_j >= Y_i} e_j + G(Y_i) * sum_{Y_j < Y_i, j eligible} e_j / G(Y_j)``.
    """
    shift = float(np.max(s))
    e = np.exp(s - shift)
    eligible = events != k
    if not censored_in_risk_set:
        eligible &= events != 0
    g_num = np.asarray(G(times), dtype=float)
    g_den = np.maximum(g_num, floor)

    uniq, inv = np.unique(times, return_inverse=True)
    m = uniq.size
    at_or_after = np.bincount(inv, weights=e, minlength=m)[::-1].cumsum()[::-1]
    before = np.concatenate([[0.0], np.bincount(inv, weights=np.where(eligible, e / g_den, 0.0),
                                                minlength=m).cumsum()[:-1]])
    g_u = np.asarray(G(uniq), dtype=float)
    denom_u = at_or_after + g_u * before
    return shift, e, eligible, g_den, uniq, inv, g_u, denom_u


def neg_log_partial_likelihood(scores, offsets, times, events, k: int, G: StepFunction,
                               floor: float = DEFAULT_FLOOR, censored_in_risk_set: bool = False):
    """Mean negative IPCW log partial likelihood over event-``k`` subjects.

    Returns ``(loss, dloss_dscores)``.
    """
    scores = np.asarray(scores, dtype=float)
    s = scores + np.asarray(offsets, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events)
    if not (s.shape == times.shape == events.shape) or s.size == 0:
        raise ValueError("scores, offsets and labels must share a nonzero length")
    is_k = events == k
    n_k = int(is_k.sum())
    if n_k == 0:
        raise ValueError(f"no events of type {k} in batch")

    shift, e, eligible, g_den, uniq, inv, g_u, denom_u = _risk_set_sums(
        s, times, events, k, G, floor, censored_in_risk_set)
    denom = denom_u[inv]
    loss = -float(np.sum(s[is_k] - shift - np.log(denom[is_k]))) / n_k

    m = uniq.size
    inv_d = np.bincount(inv, weights=np.where(is_k, 1.0 / denom, 0.0), minlength=m)
    # sum over event-k anchors with Y_i <= Y_j
    upto = inv_d.cumsum()
    # sum over event-k anchors with Y_i > Y_j, weighted by G(Y_i)
    after = np.concatenate([(inv_d * g_u)[::-1].cumsum()[::-1][1:], [0.0]])
    exposure = upto[inv] + np.where(eligible, after[inv] / g_den, 0.0)
    grad = -(is_k.astype(float) - e * exposure) / n_k
    return loss, grad


def breslow_baseline(scores, offsets, times, events, k: int, G: StepFunction,
                     floor: float = DEFAULT_FLOOR,
                     censored_in_risk_set: bool = False) -> StepFunction:
    """IPCW Breslow estimate of the baseline cumulative subhazard.

    The jump at each distinct event-``k`` time is ``d_k(h) / sum_{j in R(h)} w_j(h) exp(s_j)``.
    """
    s = np.asarray(scores, dtype=float) + np.asarray(offsets, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events)
    if not np.any(events == k):
        raise ValueError(f"no events of type {k}")
    shift, _, _, _, uniq, inv, _, denom_u = _risk_set_sums(s, times, events, k, G, floor,
                                                          censored_in_risk_set)
    d_u = np.bincount(inv, weights=(events == k).astype(float), minlength=uniq.size)
    at = d_u > 0
    if np.any(denom_u[at] <= 0):
        raise ValueError("zero Breslow denominator (all risk-set weights vanish)")
    jumps = d_u[at] / denom_u[at] * math.exp(-shift)
    return StepFunction(uniq[at], np.cumsum(jumps), 0.0)


# ------------------------------------------------------------ model


@dataclass
class PhaseModel:
    event_k: int
    net: risk_net.MlpParams
    baseline_cum: StepFunction
    feature_slice: str = "phase1"
    offset_source: "PhaseModel | None" = None
    feature_names: list = field(default_factory=list)

    def features(self, snaps) -> np.ndarray:
        if self.feature_slice == "phase1":
            return snaps.phase1
        if self.feature_slice == "phase1+2":
            return np.hstack([snaps.phase1, snaps.phase2])
        raise ValueError(f"unknown feature slice {self.feature_slice!r}")

    def offsets(self, snaps) -> np.ndarray:
        if self.offset_source is None:
            return np.zeros(len(snaps))
        return self.offset_source.score(snaps)

    def net_score(self, snaps) -> np.ndarray:
        """This phase's own network output (the phase-2 increment for a phase-2 model)."""
        return risk_net.forward(self.net, self.features(snaps), training=False)[0]

    def score(self, snaps) -> np.ndarray:
        return self.net_score(snaps) + self.offsets(snaps)

    def log_cumhazard(self, snaps, h: float, score=None) -> np.ndarray:
        """``score + ln Lambda0(h)``: a CIF-monotone ranking that does not saturate."""
        score = self.score(snaps) if score is None else score
        lam = self.baseline_cum(h)
        with np.errstate(divide="ignore"):
            return score + (math.log(lam) if lam > 0 else -math.inf)

    def cif(self, snaps, h: float, score=None) -> np.ndarray:
        if h <= 0:
            raise ValueError("horizon must be positive")
        score = self.score(snaps) if score is None else score
        return -np.expm1(-np.exp(score) * self.baseline_cum(h))

    def to_dict(self, offset_ref=None) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "event_k": self.event_k,
            "feature_slice": self.feature_slice,
            "feature_names": list(self.feature_names),
            "net": self.net.to_dict(),
            "baseline_cum": self.baseline_cum.to_dict(),
            "offset_source": offset_ref if offset_ref is not None else (
                None if self.offset_source is None else self.offset_source.to_dict()),
        }

    @classmethod
    def from_dict(cls, d: dict, offset_source=None) -> "PhaseModel":
        if d.get("version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported phase-model schema version {d.get('version')!r}")
        if offset_source is None and isinstance(d.get("offset_source"), dict):
            offset_source = cls.from_dict(d["offset_source"])
        return cls(d["event_k"], risk_net.MlpParams.from_dict(d["net"]),
                   StepFunction.from_dict(d["baseline_cum"]), d["feature_slice"], offset_source,
                   list(d.get("feature_names", [])))


def predict_cif(model: PhaseModel, snapshot, h: float) -> float:
    """CIF of a single ``Snapshot`` at horizon ``h``."""
    from .data_model import SnapshotSet

    one = SnapshotSet.from_snapshots([snapshot])
    return float(model.cif(one, h)[0])


# ------------------------------------------------------------ training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_cindex: float


@dataclass
class FitLog:
    event_k: int
    feature_slice: str
    runs: dict = field(default_factory=dict)  # lr -> list of EpochRecord dicts
    selected_lr: float = math.nan
    selected_epoch: int = -1
    selected_val_cindex: float = math.nan
    selected_val_loss: float = math.nan

    def to_dict(self) -> dict:
        return {
            "event_k": self.event_k,
            "feature_slice": self.feature_slice,
            "runs": {repr(lr): recs for lr, recs in self.runs.items()},
            "selected_lr": self.selected_lr,
            "selected_epoch": self.selected_epoch,
            "selected_val_cindex": self.selected_val_cindex,
            "selected_val_loss": self.selected_val_loss,
        }


def _batches(rng, snaps, batch_size, one_per_subject):
    n = len(snaps)
    if one_per_subject:
        order = rng.permutation(n)
        _, first = np.unique(snaps.subject_id[order], return_index=True)
        idx = order[np.sort(first)]
        idx = idx[rng.permutation(idx.size)]
    else:
        idx = rng.permutation(n)
    size = idx.size if batch_size is None else batch_size
    return [idx[i:i + size] for i in range(0, idx.size, size)]


def _checkpoint_key(metric, rec):
    c = rec["val_cindex"]
    c = -math.inf if math.isnan(c) else c
    if metric == "cindex":
        return (c, -rec["val_loss"])
    return (-rec["val_loss"], c)


def _train_one_lr(lr, x_tr, off_tr, y_tr, d_tr, train, x_va, off_va, val, k, G, cfg, params0):
    params = params0.copy()
    state = risk_net.AdamState.for_params(params, lr, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, int(round(lr * 1e9))])
    y_va, d_va = val.residual_time, val.event
    has_val_events = np.any(d_va == k)

    history, checkpoints = [], []
    best_loss, since_best = math.inf, 0
    for epoch in range(1, cfg.max_iterations + 1):
        losses = []
        for b in _batches(rng, train, cfg.batch_size, cfg.sample_one_per_subject):
            if not np.any(d_tr[b] == k):
                continue
            out, cache = risk_net.forward(params, x_tr[b], training=True, rng=rng)
            loss, grad = neg_log_partial_likelihood(out, off_tr[b], y_tr[b], d_tr[b], k, G,
                                                    cfg.ipcw_floor, cfg.censored_in_risk_set)
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise FitError(f"non-finite training loss at epoch {epoch} (lr={lr}, event {k}, "
                               f"batch size {b.size}, max |score| {np.max(np.abs(out)):.3g})")
            grads, _ = risk_net.backward(params, cache, grad)
            risk_net.adam_step(params, grads, state)
            losses.append(loss * b.size)
        train_loss = float(np.sum(losses) / len(train))

        s_va = risk_net.forward(params, x_va, training=False)[0]
        if has_val_events:
            val_loss, _ = neg_log_partial_likelihood(s_va, off_va, y_va, d_va, k, G,
                                                     cfg.ipcw_floor, cfg.censored_in_risk_set)
        else:
            val_loss = train_loss
        if not math.isfinite(val_loss):
            raise FitError(f"non-finite validation loss at epoch {epoch} (lr={lr}, event {k})")
        val_c = mean_cindex_over_times(s_va + off_va, val, k, cfg.eval_times)
        rec = {"epoch": epoch, "train_loss": train_loss, "val_loss": float(val_loss),
               "val_cindex": val_c}
        history.append(rec)
        checkpoints.append(params.copy())

        if val_loss < best_loss:
            best_loss, since_best = val_loss, 0
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                break

    best = max(range(len(history)), key=lambda i: (_checkpoint_key(cfg.checkpoint_metric,
                                                                   history[i]), -i))
    return history, best, checkpoints[best]


def fit_phase(train, val, k: int, feature_slice: str = "phase1",
              offset_model: PhaseModel | None = None, cfg: FitConfig = FitConfig(),
              return_log: bool = False):
    """Fit one Fine-Gray phase for event ``k``.

    With ``offset_model`` the frozen model's score enters as a fixed offset.
    Learning rates in ``cfg.learning_rates`` are tried in order and the one
    whose selected checkpoint has the best validation metric wins.
    """
    if feature_slice not in FEATURE_SLICES:
        raise ValueError(f"feature_slice must be one of {FEATURE_SLICES}")
    if not np.any(train.event == k):
        raise FitError(f"event {k} has no occurrences in the training snapshots")
    if len(val) == 0:
        raise FitError("empty validation set")

    stub = PhaseModel(k, None, None, feature_slice, offset_model)
    x_tr, x_va = stub.features(train), stub.features(val)
    off_tr, off_va = stub.offsets(train), stub.offsets(val)
    y_tr, d_tr = train.residual_time, train.event
    G = censoring_survival(y_tr, d_tr)

    net_cfg = risk_net.MlpConfig(x_tr.shape[1], cfg.hidden_dims, cfg.dropout_rate, cfg.seed)
    params0 = risk_net.init(net_cfg)
    params0.set_standardization(x_tr)

    fit_log = FitLog(k, feature_slice)
    best = None
    for lr in cfg.learning_rates:
        history, i, params = _train_one_lr(lr, x_tr, off_tr, y_tr, d_tr, train, x_va, off_va,
                                           val, k, G, cfg, params0)
        fit_log.runs[lr] = history
        rec = history[i]
        log.info("event %d %s lr=%g: %d epochs, checkpoint %d (val loss %.5f, c-index %.4f)",
                 k, feature_slice, lr, len(history), rec["epoch"], rec["val_loss"],
                 rec["val_cindex"])
        key = _checkpoint_key(cfg.checkpoint_metric, rec)
        if best is None or key > best[0]:
            best = (key, lr, rec, params)
    _, lr, rec, params = best
    fit_log.selected_lr = lr
    fit_log.selected_epoch = rec["epoch"]
    fit_log.selected_val_cindex = rec["val_cindex"]
    fit_log.selected_val_loss = rec["val_loss"]

    params.version = 0
    scores = risk_net.forward(params, x_tr, training=False)[0]
    baseline = breslow_baseline(scores, off_tr, y_tr, d_tr, k, G, cfg.ipcw_floor,
                                cfg.censored_in_risk_set)
    names = list(train.phase1_names) + (list(train.phase2_names) if feature_slice == "phase1+2"
                                        else [])
    model = PhaseModel(k, params, baseline, feature_slice, offset_model, names)
    return (model, fit_log) if return_log else model


def fit_config_to_dict(cfg: FitConfig) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

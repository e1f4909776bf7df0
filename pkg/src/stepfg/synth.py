"""Known-truth competing-risks generator.

Cause 1 follows the two-cause proportional-subdistribution-hazards design:

    F1(h | x) = 1 - (1 - p (1 - exp(-h / scale)))^exp(eta),

so ``P(cause 1) = 1 - (1 - p)^exp(eta)``. Given cause 2, the time is
exponential with rate ``exp(x . beta_competing) / scale``. Censoring is
exponential and independent of covariates. Times are in hours.

Each subject also carries latent dynamic factors ``z``. Factor 0 sets the
level of an AR(1) mean-BP series, factor 1 (if present) the norepinephrine
dose level. With ``dynamic_signal`` the linear predictor becomes
``eta = x . beta1 + z . beta2``; otherwise ``eta = x . beta1`` and the series
carry no outcome information.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize

from .data_model import SERIES_COLUMNS, Dataset, Subject, write_dataset

N_CAUSES = 2


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 1000
    beta1: tuple = (0.8, -0.5, 0.6, 0.0)
    beta2: tuple = (1.0,)
    beta_competing: tuple = ()
    p: float = 0.6
    censor_rate: float = 0.005  # per hour
    static_dim: int = 4
    dynamic_dim: int = 1
    dynamic_signal: bool = False
    time_scale_hours: float = 48.0
    max_series_hours: int = 240
    seed: int = 0

    def __post_init__(self):
        for name in ("beta1", "beta2", "beta_competing"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if len(self.beta1) != self.static_dim:
            raise ValueError("beta1 must have static_dim entries")
        if len(self.beta2) != self.dynamic_dim:
            raise ValueError("beta2 must have dynamic_dim entries")
        if self.beta_competing and len(self.beta_competing) != self.static_dim:
            raise ValueError("beta_competing must be empty or have static_dim entries")
        if not 0 < self.p < 1:
            raise ValueError("p must lie in (0, 1)")
        if self.censor_rate < 0 or self.n_subjects < 1 or self.static_dim < 1:
            raise ValueError("invalid synthetic configuration")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


def static_column_names(cfg: SynthConfig) -> list:
    return [f"x{i}" for i in range(cfg.static_dim)]


def sample_static(rng, n: int, dim: int) -> np.ndarray:
    """First half standard normal, second half Bernoulli(0.5)."""
    n_cont = (dim + 1) // 2
    x = np.empty((n, dim))
    x[:, :n_cont] = rng.standard_normal((n, n_cont))
    x[:, n_cont:] = rng.integers(0, 2, size=(n, dim - n_cont))
    return x


def linear_predictor(cfg: SynthConfig, x, z=None) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    eta = x @ np.asarray(cfg.beta1)
    if cfg.dynamic_signal:
        if z is None:
            raise ValueError("dynamic_signal needs latent factors z")
        eta = eta + np.atleast_2d(np.asarray(z, dtype=float)) @ np.asarray(cfg.beta2)
    return eta


def closed_form_cif1(cfg: SynthConfig, x, h, z=None):
    """Exact cause-1 CIF at horizon(s) ``h``."""
    eta = linear_predictor(cfg, x, z)
    h = np.asarray(h, dtype=float)
    u = h / cfg.time_scale_hours
    out = 1.0 - (1.0 - cfg.p * (-np.expm1(-u))) ** np.exp(eta)
    return out if out.size > 1 else float(out.reshape(-1)[0])


def draw_events(cfg: SynthConfig, rng, x, z=None):
    """Latent (uncensored) event times in hours and causes for rows of ``x``."""
    x = np.atleast_2d(x)
    n = x.shape[0]
    eta = linear_predictor(cfg, x, z)
    pi1 = 1.0 - (1.0 - cfg.p) ** np.exp(eta)
    cause1 = rng.random(n) < pi1
    v = rng.random(n)
    # invert the conditional cause-1 distribution F1(u) / pi1 = v
    inner = 1.0 - (1.0 - v * pi1) ** np.exp(-eta)
    u1 = -np.log1p(-np.minimum(inner / cfg.p, 1.0 - 1e-16))
    rate2 = np.exp(x @ np.asarray(cfg.beta_competing)) if cfg.beta_competing else np.ones(n)
    u2 = rng.exponential(size=n) / rate2
    u = np.where(cause1, u1, u2)
    return np.maximum(u * cfg.time_scale_hours, 1e-9), np.where(cause1, 1, 2)


def _series(rng, z, y_hours, max_hours):
    """Hourly hemodynamic rows for hours strictly before ``y_hours``."""
    last = min(int(math.ceil(y_hours)) - 1, max_hours)
    if last < 0:
        return np.zeros(0, dtype=int), np.zeros((0, len(SERIES_COLUMNS)))
    start = int(rng.integers(0, 5))
    hours = np.arange(start, last + 1)
    n = hours.size
    if n == 0:
        return hours, np.zeros((0, len(SERIES_COLUMNS)))
    noise = np.empty(n)
    noise[0] = rng.normal(0.0, 5.0)
    for i in range(1, n):
        noise[i] = 0.8 * noise[i - 1] + rng.normal(0.0, 3.0)
    mean_bp = 78.0 + 8.0 * z[0] + noise
    spread_lo = rng.uniform(1.0, 8.0, n)
    spread_hi = rng.uniform(1.0, 8.0, n)
    nor_level = 0.05 * (1.0 + (z[1] if z.size > 1 else 0.0))
    nor = np.where(mean_bp < 70.0, np.maximum(nor_level + 0.01 * (70.0 - mean_bp), 0.0), 0.0)
    vals = np.full((n, len(SERIES_COLUMNS)), np.nan)
    vals[:, 0] = np.round(mean_bp, 2)
    vals[:, 1] = np.round(mean_bp - spread_lo, 2)
    vals[:, 2] = np.round(mean_bp + spread_hi, 2)
    vals[:, 5] = np.where(nor > 0, np.round(nor, 4), np.nan)
    other = rng.random((n, 4)) < 0.03
    for j, col in zip(range(4), (3, 4, 6, 7)):
        vals[:, col] = np.where(other[:, j], np.round(rng.uniform(0.01, 0.2, n), 4), np.nan)
    # sporadic missing BP hours (never the first)
    miss = rng.random(n) < 0.1
    miss[0] = False
    vals[miss, :3] = np.nan
    return hours, vals


def generate(cfg: SynthConfig, return_latent: bool = False):
    """Simulate ``cfg.n_subjects`` subjects; deterministic in ``cfg.seed``.

    The stratum is ``1 +`` the last (Bernoulli) covariate, or 1 when there is
    no Bernoulli covariate. With ``return_latent`` the latent dynamic factors
    are returned alongside the dataset.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_subjects
    x = sample_static(rng, n, cfg.static_dim)
    z = rng.standard_normal((n, cfg.dynamic_dim))
    t_event, cause = draw_events(cfg, rng, x, z)
    if cfg.censor_rate > 0:
        c = rng.exponential(1.0 / cfg.censor_rate, size=n)
    else:
        c = np.full(n, np.inf)
    y = np.minimum(t_event, c)
    event = np.where(t_event <= c, cause, 0)
    has_binary = cfg.static_dim >= 2
    stratum = x[:, -1].astype(int) + 1 if has_binary else np.ones(n, dtype=int)

    width = len(str(n))
    subjects = []
    for i in range(n):
        hours, vals = _series(rng, z[i], y[i], cfg.max_series_hours)
        subjects.append(Subject(f"s{i:0{width}d}", float(y[i]), int(event[i]), x[i].copy(),
                                int(stratum[i]), hours, vals))
    names = static_column_names(cfg)
    registry = [{"name": c, "kind": "numeric"} for c in names]
    ds = Dataset(subjects, names, registry, N_CAUSES)
    return (ds, z) if return_latent else ds


@dataclass
class OracleResult:
    estimate: float
    mc_stderr: float
    closed_form: float | None = None


def oracle_cif(cfg: SynthConfig, x, h: float, n_mc: int = 100_000, k: int = 1, z=None,
               seed: int = 12345) -> OracleResult:
    """Monte Carlo CIF of cause ``k`` at ``h`` for one covariate vector (no censoring)."""
    if n_mc < 1000:
        raise ValueError("n_mc must be at least 1000")
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=float).reshape(1, -1)
    xs = np.repeat(x, n_mc, axis=0)
    zs = None if z is None else np.repeat(np.asarray(z, dtype=float).reshape(1, -1), n_mc, axis=0)
    if cfg.dynamic_signal and zs is None:
        raise ValueError("dynamic_signal needs latent factors z")
    t, d = draw_events(cfg, rng, xs, zs)
    hit = (t <= h) & (d == k)
    est = float(hit.mean())
    se = math.sqrt(max(est * (1.0 - est), 1.0 / n_mc) / n_mc)
    cf = closed_form_cif1(cfg, x, h, z) if k == 1 else None
    return OracleResult(est, se, cf)


def censored_fraction(cfg: SynthConfig, n_mc: int = 200_000, seed: int = 99) -> float:
    """Expected share of censored subjects, by Monte Carlo over latent times."""
    rng = np.random.default_rng(seed)
    x = sample_static(rng, n_mc, cfg.static_dim)
    z = rng.standard_normal((n_mc, cfg.dynamic_dim))
    t, _ = draw_events(cfg, rng, x, z)
    if cfg.censor_rate == 0:
        return 0.0
    # P(C < T) for exponential C, averaged over T
    return float(np.mean(-np.expm1(-cfg.censor_rate * t)))


def calibrate_censor_rate(cfg: SynthConfig, target: float) -> float:
    """Censoring rate giving an expected censored share of ``target``."""
    from dataclasses import replace

    if not 0 < target < 1:
        raise ValueError("target must lie in (0, 1)")
    f = lambda r: censored_fraction(replace(cfg, censor_rate=r)) - target
    return float(optimize.brentq(f, 1e-8, 10.0, xtol=1e-10))


def write_simulation(cfg: SynthConfig, out_dir) -> Dataset:
    """Write subjects.csv, timeseries.csv and truth.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate(cfg)
    write_dataset(ds, out / "subjects.csv", out / "timeseries.csv")
    truth = {"config": cfg.to_dict(), "beta1": list(cfg.beta1), "beta2": list(cfg.beta2),
             "p": cfg.p, "static_columns": static_column_names(cfg)}
    (out / "truth.json").write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n")
    return ds

"""Feed-forward risk network with hand-written backprop and an Adam optimizer.

The network maps a standardized feature vector to a scalar log-subhazard
score: ``Linear -> ReLU -> Dropout`` for each hidden layer, followed by a
bias-free linear output layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_dims: tuple = (64, 32)
    dropout_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden layer widths must be >= 1")


@dataclass
class MlpParams:
    """Layer weights (``weights[l]`` has shape fan_in x fan_out), hidden biases,
    and the input standardization folded into the model."""

    config: MlpConfig
    weights: list
    biases: list
    mean: np.ndarray
    std: np.ndarray
    version: int = 0

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MlpParams":
        return MlpParams(self.config, [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.mean.copy(), self.std.copy(),
                         self.version)

    def set_standardization(self, x: np.ndarray) -> None:
        """Use column means and standard deviations of ``x``; constant columns get std 1."""
        x = np.asarray(x, dtype=float)
        self.mean = x.mean(axis=0)
        std = x.std(axis=0)
        self.std = np.where(std > 0, std, 1.0)

    def linear_coefficients(self) -> tuple[np.ndarray, float]:
        """Coefficients and intercept on the raw input scale (0-hidden-layer nets only)."""
        if self.config.hidden_dims:
            raise ValueError("linear_coefficients needs a network without hidden layers")
        w = self.weights[0][:, 0] / self.std
        return w, float(-np.dot(w, self.mean))

    def to_dict(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "config": {
                "input_dim": self.config.input_dim,
                "hidden_dims": list(self.config.hidden_dims),
                "dropout_rate": self.config.dropout_rate,
                "seed": self.config.seed,
            },
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "weights": [{"shape": list(w.shape), "data": w.ravel().tolist()} for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        if d.get("version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported network schema version {d.get('version')!r}")
        c = d["config"]
        config = MlpConfig(c["input_dim"], tuple(c["hidden_dims"]), c["dropout_rate"], c["seed"])
        weights = [np.asarray(w["data"], dtype=float).reshape(w["shape"]) for w in d["weights"]]
        biases = [np.asarray(b, dtype=float) for b in d["biases"]]
        return cls(config, weights, biases, np.asarray(d["mean"], dtype=float),
                   np.asarray(d["std"], dtype=float))


def init(config: MlpConfig) -> MlpParams:
    """Glorot-uniform weights, zero biases; deterministic in ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    dims = [config.input_dim, *config.hidden_dims, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    for width in config.hidden_dims:
        biases.append(np.zeros(width))
    return MlpParams(config, weights, biases, np.zeros(config.input_dim), np.ones(config.input_dim))


@dataclass
class ForwardCache:
    params_id: int
    params_version: int
    inputs: list  # input of every linear layer
    masks: list   # combined ReLU * dropout-scale multiplier per hidden layer
    single: bool


def forward(params: MlpParams, x, training: bool = False, rng=None):
    """Score a vector (returns a float) or a batch of rows (returns an array).

    Dropout is inverted: kept units are scaled by ``1 / (1 - p)`` while
    training, and evaluation applies no mask and no rescaling.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != params.config.input_dim:
        raise ValueError(f"expected {params.config.input_dim} features, got {h.shape[1]}")
    p = params.config.dropout_rate
    if training and p > 0 and rng is None:
        raise ValueError("training with dropout needs an rng")

    h = (h - params.mean) / params.std
    inputs, masks = [], []
    for w, b in zip(params.weights[:-1], params.biases):
        inputs.append(h)
        z = h @ w + b
        mask = (z > 0).astype(float)
        if training and p > 0:
            mask *= (rng.random(z.shape) >= p) / (1.0 - p)
        masks.append(mask)
        h = z * mask
    inputs.append(h)
    score = (h @ params.weights[-1])[:, 0]
    cache = ForwardCache(id(params), params.version, inputs, masks, single)
    return (float(score[0]) if single else score), cache


def backward(params: MlpParams, cache: ForwardCache, upstream):
    """Gradients of ``sum(upstream * score)`` w.r.t. weights, biases and raw input.

    Returns ``(grads, dx)`` where ``grads`` has keys ``"weights"`` and
    ``"biases"`` mirroring ``params``; batch contributions are summed.
    """
    if cache.params_id != id(params) or cache.params_version != params.version:
        raise ValueError("stale cache: parameters changed since the forward pass")
    g = np.atleast_1d(np.asarray(upstream, dtype=float))[:, None]
    gw = [None] * params.n_layers
    gb = [None] * len(params.biases)

    gw[-1] = cache.inputs[-1].T @ g
    delta = g @ params.weights[-1].T
    for layer in range(params.n_layers - 2, -1, -1):
        delta = delta * cache.masks[layer]
        gw[layer] = cache.inputs[layer].T @ delta
        gb[layer] = delta.sum(axis=0)
        delta = delta @ params.weights[layer].T
    dx = delta / params.std
    if cache.single:
        dx = dx[0]
    return {"weights": gw, "biases": gb}, dx


@dataclass
class AdamState:
    learning_rate: float
    weight_decay: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: MlpParams, learning_rate: float, weight_decay: float = 0.001,
                   **kw) -> "AdamState":
        state = cls(learning_rate, weight_decay, **kw)
        for kind in ("weights", "biases"):
            arrays = getattr(params, kind)
            state.m[kind] = [np.zeros_like(a) for a in arrays]
            state.v[kind] = [np.zeros_like(a) for a in arrays]
        return state


def adam_step(params: MlpParams, grads: dict, state: AdamState) -> None:
    """One in-place Adam update with decoupled weight decay on weights only."""
    state.step += 1
    lr, b1, b2 = state.learning_rate, state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for kind in ("weights", "biases"):
        arrays = getattr(params, kind)
        for a, g, m, v in zip(arrays, grads[kind], state.m[kind], state.v[kind]):
            if a.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {a.shape}")
            if kind == "weights" and state.weight_decay:
                a *= 1.0 - lr * state.weight_decay
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            a -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    params.version += 1

"""Dense probabilistic network in plain NumPy.

The network maps an input vector to ``2*K`` raw outputs.  The first ``K`` are
the predictive means; the last ``K`` go through ``softplus(z) + 1e-6`` to give
strictly positive predictive variances.  Hidden layers use LeakyReLU.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import DomainError, InputShapeError

FORMAT_VERSION = 1
VARIANCE_FLOOR = 1e-6
VARIANCE_TRANSFORM = "softplus+1e-6"
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class LayerParams:
    weights: np.ndarray  # (out_dim, in_dim)
    biases: np.ndarray  # (out_dim,)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class ProbNet:
    """Feed-forward network with a doubled (mean, variance) output head."""

    layers: list[LayerParams]
    slope: float = 0.01

    def __post_init__(self):
        if not self.layers:
            raise InputShapeError("a network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise InputShapeError(
                    f"layer widths do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )
        if self.layers[-1].out_dim % 2:
            raise InputShapeError("final layer must have an even number (2*K) of outputs")

    @classmethod
    def init(cls, input_dim: int, output_dim: int, hidden=(64, 64, 64),
             seed=None, slope: float = 0.01) -> "ProbNet":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        widths = [input_dim, *hidden, 2 * output_dim]
        layers = []
        for fan_in, fan_out in zip(widths, widths[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            layers.append(LayerParams(w, np.zeros(fan_out)))
        return cls(layers, slope)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim // 2

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(layer.out_dim for layer in self.layers[:-1])

    def params(self) -> list[np.ndarray]:
        """Flat parameter list ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.biases))
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "ProbNet":
        return ProbNet(
            [LayerParams(l.weights.copy(), l.biases.copy()) for l in self.layers],
            self.slope,
        )

    def to_dict(self) -> dict:
        return {
            "format": "deuq.probnet",
            "version": FORMAT_VERSION,
            "activation": "leaky_relu",
            "slope": self.slope,
            "variance_transform": VARIANCE_TRANSFORM,
            "layers": [
                {
                    "shape": list(l.weights.shape),
                    "weights": l.weights.ravel().tolist(),
                    "biases": l.biases.tolist(),
                }
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ProbNet":
        if doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported network format version {doc.get('version')!r}")
        if doc.get("variance_transform") != VARIANCE_TRANSFORM:
            raise ValueError(f"unknown variance transform {doc.get('variance_transform')!r}")
        layers = []
        for entry in doc["layers"]:
            shape = tuple(entry["shape"])
            w = np.asarray(entry["weights"], dtype=float).reshape(shape)
            layers.append(LayerParams(w, np.asarray(entry["biases"], dtype=float)))
        return cls(layers, float(doc["slope"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ProbNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def leaky_relu(x, slope: float = 0.01):
    return np.where(x >= 0, x, slope * x)


def softplus(z):
    return np.logaddexp(0.0, z)


def _as_batch(net: ProbNet, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise InputShapeError(
            f"expected input of length {net.input_dim}, got array of shape {x.shape}"
        )
    return X, single


def _forward_trace(net: ProbNet, X: np.ndarray):
    """Forward pass keeping pre-activations for the backward pass."""
    acts = [X]
    pre = []
    h = X
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        z = h @ layer.weights.T + layer.biases
        pre.append(z)
        if i < last:
            h = np.where(z >= 0, z, net.slope * z)
            acts.append(h)
    return acts, pre


def forward(net: ProbNet, x) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance for one input vector or a batch of rows."""
    X, single = _as_batch(net, x)
    _, pre = _forward_trace(net, X)
    out = pre[-1]
    K = net.output_dim
    mu = out[:, :K]
    sigma2 = softplus(out[:, K:]) + VARIANCE_FLOOR
    if single:
        return mu[0], sigma2[0]
    return mu, sigma2


def nll_loss(mu, sigma2, y) -> float:
    """Gaussian negative log-likelihood averaged over all entries."""
    mu, sigma2, y = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (mu, sigma2, y)))
    if np.any(sigma2 <= 0) or np.any(np.isnan(sigma2)):
        raise DomainError("variance must be strictly positive")
    s2 = np.maximum(sigma2, VARIANCE_FLOOR)
    return float(np.mean(0.5 * np.log(s2) + 0.5 * (y - mu) ** 2 / s2) + HALF_LOG_2PI)


def mse_loss(mu, y) -> float:
    mu = np.asarray(mu, dtype=float)
    y = np.asarray(y, dtype=float)
    if mu.shape != y.shape:
        raise InputShapeError(f"shape mismatch {mu.shape} vs {y.shape}")
    return float(np.mean((y - mu) ** 2))


def backward(net: ProbNet, X, Y) -> tuple[float, list[np.ndarray]]:
    """Mean-over-batch NLL and its gradient for every parameter.

    Gradients come back in the same order as :meth:`ProbNet.params`.
    """
    X, _ = _as_batch(net, X)
    Y = np.asarray(Y, dtype=float).reshape(X.shape[0], -1)
    K = net.output_dim
    if Y.shape[1] != K:
        raise InputShapeError(f"expected {K} targets per row, got {Y.shape[1]}")
    acts, pre = _forward_trace(net, X)
    out = pre[-1]
    mu = out[:, :K]
    zv = out[:, K:]
    s2 = softplus(zv) + VARIANCE_FLOOR
    r = Y - mu
    count = r.size
    loss = float(np.mean(0.5 * np.log(s2) + 0.5 * r * r / s2) + HALF_LOG_2PI)

    d_mu = -r / s2 / count
    d_s2 = 0.5 * (1.0 / s2 - r * r / (s2 * s2)) / count
    delta = np.concatenate([d_mu, d_s2 * expit(zv)], axis=1)

    grads: list[np.ndarray] = [None] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        grads[2 * i] = delta.T @ acts[i]
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ net.layers[i].weights
            delta = delta * np.where(pre[i - 1] >= 0, 1.0, net.slope)
    return loss, grads


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kw) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], **kw)


def adam_step(state: AdamState, params, grads):
    """Bias-corrected Adam update, applied in place."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InputShapeError("params, grads and optimiser state disagree in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise InputShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params

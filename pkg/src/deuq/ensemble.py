"""Deep ensembles: independent training of probabilistic nets and mixture prediction."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, DomainError, InputShapeError, TrainingDivergedError
from .nn import (
    HALF_LOG_2PI,
    VARIANCE_FLOOR,
    AdamState,
    LayerParams,
    ProbNet,
    adam_step,
    forward,
    softplus,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnsembleConfig:
    """Training hyperparameters.

    Defaults are desk scale.  Full scale is 7 hidden layers of 128 nodes,
    mini-batches of 512 and 13000 epochs at learning rate 1e-3.
    """

    members: int = 4
    epochs: int = 3000
    batch_size: int = 128
    lr: float = 1e-3
    hidden: tuple = (64, 64, 64)
    seed: int = 0
    slope: float = 0.01

    def __post_init__(self):
        if self.members < 1:
            raise ConfigurationError("an ensemble needs at least one member")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be >= 1")
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def member_seed(self, index: int) -> int:
        return self.seed + index


@dataclass
class PredictiveDist:
    """Gaussian-mixture moments per output.

    Fields have shape ``(K,)`` for one input or ``(n, K)`` for a batch; a
    batch behaves like a sequence of single-input distributions.
    """

    mu_hat: np.ndarray
    var_total: np.ndarray
    var_aleatory: np.ndarray
    var_epistemic: np.ndarray

    @property
    def std(self):
        return np.sqrt(self.var_total)

    def __len__(self):
        if self.mu_hat.ndim == 1:
            raise TypeError("single-input PredictiveDist has no length")
        return self.mu_hat.shape[0]

    def __getitem__(self, i):
        if self.mu_hat.ndim == 1:
            raise TypeError("single-input PredictiveDist is not indexable")
        return PredictiveDist(self.mu_hat[i], self.var_total[i],
                              self.var_aleatory[i], self.var_epistemic[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def output(self, k: int) -> "PredictiveDist":
        """Restrict to output column ``k``."""
        return PredictiveDist(self.mu_hat[..., k], self.var_total[..., k],
                              self.var_aleatory[..., k], self.var_epistemic[..., k])


@dataclass
class Ensemble:
    members: list
    scales: np.ndarray = None
    config: EnsembleConfig = None
    histories: list = field(default_factory=list)
    train_seconds: float = 0.0

    def __post_init__(self):
        if not self.members:
            raise ConfigurationError("an ensemble needs at least one member")
        ref = self.members[0]
        shape = [l.weights.shape for l in ref.layers]
        for m in self.members[1:]:
            if [l.weights.shape for l in m.layers] != shape:
                raise InputShapeError("ensemble members must share one architecture")
        if self.scales is None:
            self.scales = np.ones(ref.output_dim)
        self.scales = np.asarray(self.scales, dtype=float)
        if self.scales.shape != (ref.output_dim,) or np.any(self.scales <= 0):
            raise DomainError("scaling factors must be positive, one per output")

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def output_dim(self) -> int:
        return self.members[0].output_dim

    @property
    def input_dim(self) -> int:
        return self.members[0].input_dim

    def subset(self, m: int) -> "Ensemble":
        """The first ``m`` members, unscaled.

        Member ``i`` is always seeded ``seed + i``, so ``subset(m)`` of a
        larger ensemble is exactly what training an ``m``-member ensemble
        with the same config would have produced.
        """
        if not 1 <= m <= self.size:
            raise ConfigurationError(f"cannot take {m} of {self.size} members")
        cfg = replace(self.config, members=m) if self.config else None
        hist = self.histories[:m] if self.histories else []
        return Ensemble(self.members[:m], None, cfg, hist)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = []
        for i, net in enumerate(self.members):
            name = f"member_{i:03d}.json"
            net.save(d / name)
            files.append(name)
        manifest = {
            "format": "deuq.ensemble",
            "version": 1,
            "members": files,
            "scales": self.scales.tolist(),
            "config": asdict(self.config) if self.config else None,
            "seeds": [self.config.member_seed(i) for i in range(self.size)] if self.config else None,
            "train_seconds": self.train_seconds,
            "final_loss": [h[-1] if h else None for h in self.histories],
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, directory) -> "Ensemble":
        d = Path(directory)
        m = json.loads((d / "manifest.json").read_text())
        members = [ProbNet.load(d / f) for f in m["members"]]
        cfg = EnsembleConfig(**m["config"]) if m.get("config") else None
        ens = cls(members, np.asarray(m["scales"]), cfg)
        ens.train_seconds = m.get("train_seconds", 0.0)
        return ens


def _stack_backward(Ws, bs, slope, X, Y):
    """Loss and gradients for ``M`` networks at once.

    ``Ws[l]`` is ``(M, out, in)``, ``bs[l]`` is ``(M, out)``, ``X`` is
    ``(M, b, d)`` and ``Y`` is ``(M, b, K)``.  Each slice matches what
    :func:`deuq.nn.backward` computes for that member alone.
    """
    acts = [X]
    pre = []
    h = X
    last = len(Ws) - 1
    for i, (W, b) in enumerate(zip(Ws, bs)):
        z = h @ W.transpose(0, 2, 1) + b[:, None, :]
        pre.append(z)
        if i < last:
            h = np.where(z >= 0, z, slope * z)
            acts.append(h)
    K = Y.shape[2]
    out = pre[-1]
    zv = out[:, :, K:]
    s2 = softplus(zv) + VARIANCE_FLOOR
    r = Y - out[:, :, :K]
    count = r.shape[1] * r.shape[2]
    losses = np.mean(0.5 * np.log(s2) + 0.5 * r * r / s2, axis=(1, 2)) + HALF_LOG_2PI
    d_mu = -r / s2 / count
    d_s2 = 0.5 * (1.0 / s2 - r * r / (s2 * s2)) / count
    delta = np.concatenate([d_mu, d_s2 * expit(zv)], axis=2)
    grads = [None] * (2 * len(Ws))
    for i in range(last, -1, -1):
        grads[2 * i] = delta.transpose(0, 2, 1) @ acts[i]
        grads[2 * i + 1] = delta.sum(axis=1)
        if i > 0:
            delta = (delta @ Ws[i]) * np.where(pre[i - 1] >= 0, 1.0, slope)
    return losses, grads


def _train_stack(config: EnsembleConfig, X, Y, indices) -> tuple[list, list]:
    """Train the members in ``indices`` side by side.

    Every member owns a generator seeded ``config.seed + index`` that drives
    both its initialisation and its per-epoch shuffles, so results do not
    depend on which other members share the stack.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if len(X) == 0:
        raise ConfigurationError("training split is empty")
    if Y.ndim == 1:
        Y = Y[:, None]
    rngs = [np.random.default_rng(config.member_seed(i)) for i in indices]
    nets = [ProbNet.init(X.shape[1], Y.shape[1], config.hidden, seed=rng, slope=config.slope)
            for rng in rngs]
    n_layers = len(nets[0].layers)
    Ws = [np.stack([net.layers[l].weights for net in nets]) for l in range(n_layers)]
    Bs = [np.stack([net.layers[l].biases for net in nets]) for l in range(n_layers)]
    params = [p for pair in zip(Ws, Bs) for p in pair]
    opt = AdamState.for_params(params, lr=config.lr)
    n = len(X)
    bs = min(config.batch_size, n)
    n_batches = math.ceil(n / bs)
    history = np.empty((len(indices), config.epochs))
    for epoch in range(config.epochs):
        perms = np.stack([rng.permutation(n) for rng in rngs])
        total = np.zeros(len(indices))
        for j in range(n_batches):
            idx = perms[:, j * bs:(j + 1) * bs]
            losses, grads = _stack_backward(Ws, Bs, config.slope, X[idx], Y[idx])
            adam_step(opt, params, grads)
            total += losses * idx.shape[1]
        history[:, epoch] = total / n
        bad = ~np.isfinite(history[:, epoch])
        for p in params:
            bad |= ~np.isfinite(p.reshape(len(indices), -1)).all(axis=1)
        if bad.any():
            m = int(np.flatnonzero(bad)[0])
            raise TrainingDivergedError(indices[m], epoch, float(history[m, epoch]))
    members = []
    for m in range(len(indices)):
        layers = [LayerParams(Ws[l][m].copy(), Bs[l][m].copy()) for l in range(n_layers)]
        members.append(ProbNet(layers, config.slope))
    return members, [history[m].tolist() for m in range(len(indices))]


def train_member(config: EnsembleConfig, X, Y, index: int = 0) -> tuple[ProbNet, list]:
    """Train one network on the full training split with shuffled mini-batches.

    Returns the network and its per-epoch mean training NLL.
    """
    members, hist = _train_stack(config, X, Y, [index])
    return members[0], hist[0]


def train_ensemble(config: EnsembleConfig, X, Y, n_jobs: int = 1) -> Ensemble:
    """Train ``config.members`` independent networks.

    Members are trained side by side in one vectorised stack; ``n_jobs > 1``
    splits the stack across worker processes.
    """
    t0 = time.perf_counter()
    indices = list(range(config.members))
    if n_jobs > 1 and config.members > 1:
        chunks = [c.tolist() for c in np.array_split(indices, min(n_jobs, config.members))]
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(_train_stack, [config] * len(chunks), [X] * len(chunks),
                                  [Y] * len(chunks), chunks))
        members = [m for p in parts for m in p[0]]
        histories = [h for p in parts for h in p[1]]
    else:
        members, histories = _train_stack(config, X, Y, indices)
    for i, h in enumerate(histories):
        log.info("member %d/%d final NLL %.4f", i + 1, config.members, h[-1])
    ens = Ensemble(members, None, config, histories)
    ens.train_seconds = time.perf_counter() - t0
    return ens


def mixture(mus, sigma2s, scales=None) -> PredictiveDist:
    """Combine stacked member moments of shape ``(M, ...)`` into one Gaussian.

    Epistemic variance uses the centred two-pass form.  With scaling factors
    every variance component is multiplied by ``s**2`` so the decomposition
    still adds up.
    """
    mus = np.asarray(mus, dtype=float)
    sigma2s = np.asarray(sigma2s, dtype=float)
    mu_hat = mus.mean(axis=0)
    epi = np.maximum(np.mean((mus - mu_hat) ** 2, axis=0), 0.0)
    ale = sigma2s.mean(axis=0)
    if scales is not None:
        s2 = np.asarray(scales, dtype=float) ** 2
        epi = epi * s2
        ale = ale * s2
    return PredictiveDist(mu_hat, ale + epi, ale, epi)


def member_outputs(ensemble: Ensemble, X):
    outs = [forward(net, X) for net in ensemble.members]
    return np.stack([o[0] for o in outs]), np.stack([o[1] for o in outs])


def predict(ensemble: Ensemble, x) -> PredictiveDist:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InputShapeError("predict takes one input vector; use predict_batch for rows")
    mus, s2 = member_outputs(ensemble, x)
    return mixture(mus, s2, ensemble.scales)


def predict_batch(ensemble: Ensemble, X) -> PredictiveDist:
    X = np.asarray(X, dtype=float)
    K = ensemble.output_dim
    if X.size == 0:
        empty = np.zeros((0, K))
        return PredictiveDist(empty, empty.copy(), empty.copy(), empty.copy())
    mus, s2 = member_outputs(ensemble, np.atleast_2d(X))
    return mixture(mus, s2, ensemble.scales)

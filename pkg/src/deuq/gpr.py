"""Exact Gaussian process regression with an isotropic Matérn 5/2 kernel.

One independent GP per output column.  Hyperparameters (signal variance,
lengthscale, noise variance) are chosen by maximising the log marginal
likelihood with a derivative-free coordinate search on log-spaced grids.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.spatial.distance import cdist

from .errors import DomainError, IllConditionedKernelError

log = logging.getLogger(__name__)

SQRT5 = math.sqrt(5.0)
JITTER_START = 1e-8
JITTER_MAX = 1e-4


@dataclass(frozen=True)
class KernelParams:
    signal_var: float = 1.0
    lengthscale: float = 1.0
    noise_var: float = 1e-2

    def __post_init__(self):
        for name in ("signal_var", "lengthscale", "noise_var"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise DomainError(f"{name} must be positive and finite, got {v}")


def _matern_from_dist(r, signal_var, lengthscale):
    t = SQRT5 * r / lengthscale
    return signal_var * (1.0 + t + t * t / 3.0) * np.exp(-t)


def matern52(x1, x2, params: KernelParams) -> float:
    r = float(np.linalg.norm(np.asarray(x1, dtype=float) - np.asarray(x2, dtype=float)))
    return float(_matern_from_dist(r, params.signal_var, params.lengthscale))


def matern52_matrix(A, B, params: KernelParams):
    r = cdist(np.atleast_2d(A), np.atleast_2d(B))
    return _matern_from_dist(r, params.signal_var, params.lengthscale)


def _chol_with_jitter(K, scale):
    """Cholesky factor of ``K``, adding diagonal jitter only if it fails.

    Jitter starts at ``1e-8 * scale`` and grows tenfold up to ``1e-4 * scale``.
    Returns the factor and the absolute jitter used.
    """
    try:
        return cholesky(K, lower=True), 0.0
    except LinAlgError:
        pass
    jitter = JITTER_START
    eye = np.eye(K.shape[0])
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return cholesky(K + jitter * scale * eye, lower=True), jitter * scale
        except LinAlgError:
            jitter *= 10.0
    raise IllConditionedKernelError(
        f"Cholesky failed with jitter up to {JITTER_MAX:g} x signal variance"
    )


def log_marginal_likelihood(X, y, params: KernelParams) -> float:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    K = matern52_matrix(X, X, params) + params.noise_var * np.eye(len(X))
    try:
        L, _ = _chol_with_jitter(K, params.signal_var)
    except IllConditionedKernelError:
        return -np.inf
    alpha = cho_solve((L, True), y)
    return float(-0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * len(y) * math.log(2 * math.pi))


@dataclass
class GprOutput:
    params: KernelParams
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float
    lml: float = float("nan")


@dataclass
class GprModel:
    X_train: np.ndarray
    Y_train: np.ndarray
    outputs: list
    include_noise: bool = True
    train_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "format": "deuq.gpr",
            "version": 1,
            "kernel": "matern52",
            "include_noise": self.include_noise,
            "params": [vars(o.params) | {"lml": o.lml} for o in self.outputs],
            "X_train": self.X_train.tolist(),
            "Y_train": self.Y_train.tolist(),
            "train_seconds": self.train_seconds,
        }

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "GprModel":
        d = json.loads(Path(path).read_text())
        params = [KernelParams(p["signal_var"], p["lengthscale"], p["noise_var"]) for p in d["params"]]
        model = fit_fixed(np.asarray(d["X_train"]), np.asarray(d["Y_train"]), params)
        model.include_noise = d["include_noise"]
        model.train_seconds = d.get("train_seconds", 0.0)
        return model


def _factor(X, y, params: KernelParams) -> GprOutput:
    K = matern52_matrix(X, X, params) + params.noise_var * np.eye(len(X))
    L, jitter = _chol_with_jitter(K, params.signal_var)
    alpha = cho_solve((L, True), y)
    lml = float(-0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * len(y) * math.log(2 * math.pi))
    return GprOutput(params, L, alpha, jitter, lml)


def fit_fixed(X, Y, params) -> GprModel:
    """Condition on the training data with given hyperparameters (no search)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if isinstance(params, KernelParams):
        params = [params] * Y.shape[1]
    return GprModel(X, Y, [_factor(X, Y[:, k], p) for k, p in enumerate(params)])


def optimize_hyperparameters(X, y, rounds: int = 3, points: int = 9,
                             start: KernelParams | None = None) -> tuple[KernelParams, float]:
    """Coordinate-wise grid ascent on the log marginal likelihood.

    Each round sweeps signal variance, lengthscale and noise variance in turn
    over ``points`` log-spaced values centred on the incumbent; the half-width
    starts at two decades and halves every round.
    """
    y = np.asarray(y, dtype=float).ravel()
    var_y = float(np.var(y)) or 1.0
    cur = start or KernelParams(var_y, 1.0, 1e-2 * var_y)
    best = log_marginal_likelihood(X, y, cur)
    bounds = {
        "signal_var": (1e-4 * var_y, 1e4 * var_y),
        "lengthscale": (1e-3, 1e3),
        "noise_var": (1e-10 * var_y, 10 * var_y),
    }
    half = 2.0
    for _ in range(rounds):
        for name in ("signal_var", "lengthscale", "noise_var"):
            centre = math.log10(getattr(cur, name))
            lo, hi = (math.log10(b) for b in bounds[name])
            for e in np.linspace(centre - half, centre + half, points):
                e = min(max(e, lo), hi)
                cand = KernelParams(**(vars(cur) | {name: 10.0**e}))
                val = log_marginal_likelihood(X, y, cand)
                if val > best:
                    best, cur = val, cand
        half /= 2.0
    return cur, best


def gpr_fit(X, Y, rounds: int = 3, points: int = 9, max_search_points: int | None = 1000,
            seed: int = 0, include_noise: bool = True) -> GprModel:
    """Fit one GP per output column.

    The hyperparameter search runs on at most ``max_search_points`` randomly
    chosen training rows (``None`` uses all); the final model always
    conditions on the full training set.
    """
    t0 = time.perf_counter()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    rows = np.arange(len(X))
    if max_search_points is not None and len(X) > max_search_points:
        rows = np.sort(np.random.default_rng(seed).choice(len(X), max_search_points, replace=False))
    params = []
    for k in range(Y.shape[1]):
        p, lml = optimize_hyperparameters(X[rows], Y[rows, k], rounds, points)
        log.info("output %d: %s (lml %.2f)", k, p, lml)
        params.append(p)
    model = fit_fixed(X, Y, params)
    model.include_noise = include_noise
    model.train_seconds = time.perf_counter() - t0
    return model


def gpr_predict(model: GprModel, X, include_noise: bool | None = None):
    """Posterior mean and predictive variance, each ``(n, K)``."""
    Xq = np.atleast_2d(np.asarray(X, dtype=float))
    noise = model.include_noise if include_noise is None else include_noise
    K = len(model.outputs)
    mu = np.empty((len(Xq), K))
    var = np.empty((len(Xq), K))
    for k, o in enumerate(model.outputs):
        ks = matern52_matrix(Xq, model.X_train, o.params)
        mu[:, k] = ks @ o.alpha
        v = solve_triangular(o.chol, ks.T, lower=True)
        latent = np.maximum(o.params.signal_var - np.sum(v * v, axis=0), 0.0)
        var[:, k] = latent + (o.params.noise_var if noise else 0.0)
    return mu, var

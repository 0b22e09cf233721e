"""Post-hoc standard-deviation scaling.

For each output a single factor ``s`` multiplies the predicted standard
deviation; it is picked from a fixed candidate grid by minimising the
Gaussian NLL on a held-out calibration split.  Means are never touched.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .ensemble import Ensemble, predict_batch
from .errors import ConfigurationError, DomainError
from .nn import HALF_LOG_2PI


@dataclass(frozen=True)
class ScalingGrid:
    """Candidate scaling factors ``10**x`` for ``x`` evenly spaced on ``[lo, hi]``.

    ``include_identity`` adds ``s = 1`` (no calibration) to the candidates so
    the chosen factor can never do worse than leaving the model alone.
    """

    lo: float = -2.0
    hi: float = 0.18
    n: int = 100
    include_identity: bool = True

    @property
    def candidates(self) -> np.ndarray:
        if self.n < 1:
            raise ConfigurationError("scaling grid is empty")
        s = 10.0 ** np.linspace(self.lo, self.hi, self.n)
        if self.include_identity:
            s = np.union1d(s, [1.0])
        return s

    @property
    def log_step(self) -> float:
        """Spacing of the grid in log10 units."""
        return (self.hi - self.lo) / max(self.n - 1, 1)


@dataclass
class CalibrationReport:
    scales: np.ndarray
    nll_before: np.ndarray  # at s = 1
    nll_after: np.ndarray
    seconds: float

    def to_dict(self) -> dict:
        return {
            "scales": self.scales.tolist(),
            "mean_scale": float(np.mean(self.scales)),
            "nll_before": self.nll_before.tolist(),
            "nll_after": self.nll_after.tolist(),
            "seconds": self.seconds,
        }


def _as_columns(mu, sigma, y):
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    y = np.asarray(y, dtype=float)
    if mu.ndim == 1:
        mu, sigma, y = mu[:, None], sigma[:, None], y[:, None]
    if not (mu.shape == sigma.shape == y.shape):
        raise ConfigurationError(f"shape mismatch: {mu.shape}, {sigma.shape}, {y.shape}")
    if np.any(sigma <= 0):
        raise DomainError("predicted standard deviations must be positive")
    return mu, sigma, y


def scaled_nll(s, mu, sigma, y):
    """Mean NLL of ``y`` under ``N(mu, (s*sigma)^2)``, one value per candidate ``s``."""
    s = np.atleast_1d(np.asarray(s, dtype=float))[:, None]
    ss = s * np.asarray(sigma, dtype=float)[None, :]
    r2 = (np.asarray(y, dtype=float) - np.asarray(mu, dtype=float)) ** 2
    return np.mean(0.5 * np.log(ss**2) + r2 / (2.0 * ss**2), axis=1) + HALF_LOG_2PI


def fit_std_scaling(mu, sigma, y, grid=None) -> np.ndarray:
    """Per-output grid argmin of the scaled NLL; ties go to the smallest ``s``.

    ``mu``, ``sigma`` and ``y`` are ``(n, K)`` (or ``(n,)`` for one output),
    ``sigma`` being the standard deviation, not the variance.
    """
    cands = _candidates(grid)
    mu, sigma, y = _as_columns(mu, sigma, y)
    out = np.empty(mu.shape[1])
    for k in range(mu.shape[1]):
        nll = scaled_nll(cands, mu[:, k], sigma[:, k], y[:, k])
        out[k] = cands[int(np.argmin(nll))]
    return out


def closed_form_scale(mu, sigma, y) -> np.ndarray:
    """Continuous minimiser ``sqrt(mean((y - mu)^2 / sigma^2))`` per output."""
    mu, sigma, y = _as_columns(mu, sigma, y)
    return np.sqrt(np.mean(((y - mu) / sigma) ** 2, axis=0))


def _candidates(grid) -> np.ndarray:
    if grid is None:
        grid = ScalingGrid()
    cands = grid.candidates if isinstance(grid, ScalingGrid) else np.asarray(grid, dtype=float)
    if cands.size == 0:
        raise ConfigurationError("scaling grid is empty")
    if np.any(cands <= 0):
        raise ConfigurationError("scaling candidates must be positive")
    return np.sort(cands)


def apply_scaling(ensemble: Ensemble, scales) -> Ensemble:
    """Copy of ``ensemble`` reporting std ``s[k] * sigma_hat[k]``; members shared."""
    s = np.broadcast_to(np.asarray(scales, dtype=float), (ensemble.output_dim,)).copy()
    if np.any(~np.isfinite(s)) or np.any(s <= 0):
        raise DomainError(f"scaling factors must be positive, got {s}")
    return replace(ensemble, scales=s)


def calibrate(ensemble: Ensemble, X_val, Y_val, grid=None) -> tuple[Ensemble, CalibrationReport]:
    """Fit scales on a calibration split and return the rescaled ensemble."""
    t0 = time.perf_counter()
    raw = predict_batch(apply_scaling(ensemble, 1.0), X_val)
    sigma = np.sqrt(raw.var_total)
    scales = fit_std_scaling(raw.mu_hat, sigma, Y_val, grid)
    Y_val = np.asarray(Y_val, dtype=float)
    before = np.array([scaled_nll(1.0, raw.mu_hat[:, k], sigma[:, k], Y_val[:, k])[0]
                       for k in range(len(scales))])
    after = np.array([scaled_nll(scales[k], raw.mu_hat[:, k], sigma[:, k], Y_val[:, k])[0]
                      for k in range(len(scales))])
    report = CalibrationReport(scales, before, after, time.perf_counter() - t0)
    return apply_scaling(ensemble, scales), report

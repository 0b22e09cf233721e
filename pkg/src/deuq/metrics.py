"""Reliability curves and scalar uncertainty-quality metrics.

Two views of calibration are provided:

* confidence-interval coverage against nominal level (``ci_reliability``),
  summarised by AUCE;
* binned RMSE against root mean variance (``err_reliability``),
  summarised by ENCE.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .errors import ConfigurationError, DomainError
from .nn import HALF_LOG_2PI

DEFAULT_LEVELS = tuple(round(0.1 * i, 1) for i in range(1, 10))
DEFAULT_BINS = 20


@dataclass
class CIReliabilityCurve:
    nominal: np.ndarray
    observed: np.ndarray


@dataclass
class ErrReliabilityCurve:
    rmse: np.ndarray
    rmv: np.ndarray
    sizes: np.ndarray


def _aligned(mu, sigma2, y):
    mu = np.asarray(mu, dtype=float).ravel()
    sigma2 = np.asarray(sigma2, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if not (mu.shape == sigma2.shape == y.shape):
        raise ConfigurationError(f"misaligned inputs: {mu.shape}, {sigma2.shape}, {y.shape}")
    if mu.size == 0:
        raise DomainError("empty test set")
    if np.any(sigma2 < 0):
        raise DomainError("negative predictive variance")
    return mu, sigma2, y


def ci_reliability(mu, sigma2, y, levels=DEFAULT_LEVELS) -> CIReliabilityCurve:
    """Observed fraction of targets inside the central ``p`` interval, per level."""
    mu, sigma2, y = _aligned(mu, sigma2, y)
    p = np.asarray(levels, dtype=float)
    if p.size == 0 or np.any((p <= 0) | (p >= 1)):
        raise ConfigurationError("confidence levels must lie strictly inside (0, 1)")
    if np.any(np.diff(p) <= 0):
        raise ConfigurationError("confidence levels must be strictly increasing")
    half_width = norm.ppf((p + 1.0) / 2.0)[:, None] * np.sqrt(sigma2)[None, :]
    inside = np.abs(y - mu)[None, :] <= half_width
    return CIReliabilityCurve(p, inside.mean(axis=1))


def auce(curve: CIReliabilityCurve) -> float:
    if len(curve.nominal) == 0:
        raise DomainError("empty reliability curve")
    return float(np.mean(np.abs(curve.observed - curve.nominal)))


def err_reliability(mu, sigma2, y, bins: int = DEFAULT_BINS, sort_by: str = "y") -> ErrReliabilityCurve:
    """Binned RMSE vs RMV.

    Samples are ordered by target value (``sort_by="y"``) or by predicted
    variance (``sort_by="sigma"``) and cut into ``bins`` contiguous chunks
    of ``n // bins`` samples; the last chunk absorbs any remainder.
    """
    mu, sigma2, y = _aligned(mu, sigma2, y)
    n = y.size
    if bins < 1 or bins > n:
        raise ConfigurationError(f"cannot split {n} samples into {bins} bins")
    if sort_by == "y":
        order = np.argsort(y, kind="stable")
    elif sort_by == "sigma":
        order = np.argsort(sigma2, kind="stable")
    else:
        raise ConfigurationError(f"unknown sort key {sort_by!r}")
    r2 = ((y - mu) ** 2)[order]
    s2 = sigma2[order]
    size = n // bins
    edges = [i * size for i in range(bins)] + [n]
    rmse = np.array([np.sqrt(r2[a:b].mean()) for a, b in zip(edges, edges[1:])])
    rmv = np.array([np.sqrt(s2[a:b].mean()) for a, b in zip(edges, edges[1:])])
    return ErrReliabilityCurve(rmse, rmv, np.diff(edges))


def ence(curve: ErrReliabilityCurve) -> float:
    zero = np.flatnonzero(curve.rmv <= 0)
    if zero.size:
        raise DomainError(f"bin {int(zero[0])} has zero root mean variance")
    return float(np.mean(np.abs(curve.rmv - curve.rmse) / curve.rmv))


def dc_score(mu, sigma2, y):
    """Deviation from calibration ``(y - mu)^2 - sigma^2``; negative means underconfident."""
    return (np.asarray(y, dtype=float) - mu) ** 2 - np.asarray(sigma2, dtype=float)


def gaussian_nll(mu, sigma2, y):
    """Per-sample Gaussian NLL (no averaging)."""
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(sigma2 <= 0):
        raise DomainError("variance must be strictly positive")
    return 0.5 * np.log(sigma2) + 0.5 * (np.asarray(y) - mu) ** 2 / sigma2 + HALF_LOG_2PI


@dataclass
class UqReport:
    names: list
    auce: np.ndarray
    ence: np.ndarray
    nll: np.ndarray
    rmse: np.ndarray
    ci_curves: list = field(repr=False, default_factory=list)
    err_curves: list = field(repr=False, default_factory=list)
    residuals: np.ndarray = field(repr=False, default=None)
    sigmas: np.ndarray = field(repr=False, default=None)

    @property
    def avg(self) -> dict:
        return {
            "AUCE": float(np.mean(self.auce)),
            "ENCE": float(np.mean(self.ence)),
            "NLL": float(np.mean(self.nll)),
            "RMSE": float(np.mean(self.rmse)),
        }

    def to_dict(self) -> dict:
        per = {
            name: {
                "AUCE": float(self.auce[k]),
                "ENCE": float(self.ence[k]),
                "NLL": float(self.nll[k]),
                "RMSE": float(self.rmse[k]),
            }
            for k, name in enumerate(self.names)
        }
        return {"outputs": per, "Avg": self.avg}

    def write(self, directory, stem: str) -> None:
        """``<stem>.json`` plus CI/error reliability and per-sample CSVs."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2))
        with open(d / f"{stem}_ci_reliability.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["output", "nominal", "observed"])
            for name, c in zip(self.names, self.ci_curves):
                for x, y in zip(c.nominal, c.observed):
                    w.writerow([name, repr(float(x)), repr(float(y))])
        with open(d / f"{stem}_err_reliability.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["output", "rmse", "rmv"])
            for name, c in zip(self.names, self.err_curves):
                for x, y in zip(c.rmse, c.rmv):
                    w.writerow([name, repr(float(x)), repr(float(y))])
        if self.residuals is not None:
            with open(d / f"{stem}_samples.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["output", "residual", "sigma"])
                for k, name in enumerate(self.names):
                    for r, s in zip(self.residuals[:, k], self.sigmas[:, k]):
                        w.writerow([name, repr(float(r)), repr(float(s))])


def report(mu, sigma2, Y, levels=DEFAULT_LEVELS, bins: int = DEFAULT_BINS,
           names=None, sort_by: str = "y") -> UqReport:
    """AUCE, ENCE, NLL and RMSE per output column of ``(n, K)`` arrays."""
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if mu.shape != Y.shape or sigma2.shape != Y.shape:
        raise ConfigurationError(f"misaligned inputs: {mu.shape}, {sigma2.shape}, {Y.shape}")
    K = Y.shape[1]
    names = list(names) if names is not None else [f"y{k}" for k in range(K)]
    cis, errs = [], []
    a, e, nl, rm = (np.empty(K) for _ in range(4))
    for k in range(K):
        ci = ci_reliability(mu[:, k], sigma2[:, k], Y[:, k], levels)
        er = err_reliability(mu[:, k], sigma2[:, k], Y[:, k], bins, sort_by)
        cis.append(ci)
        errs.append(er)
        a[k] = auce(ci)
        e[k] = ence(er)
        nl[k] = float(np.mean(gaussian_nll(mu[:, k], sigma2[:, k], Y[:, k])))
        rm[k] = float(np.sqrt(np.mean((Y[:, k] - mu[:, k]) ** 2)))
    return UqReport(names, a, e, nl, rm, cis, errs, Y - mu, np.sqrt(sigma2))

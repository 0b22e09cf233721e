"""One step of two-objective Bayesian optimisation.

Expected improvement is computed per objective from a surrogate's Gaussian
prediction, and NSGA-II searches the design box for the Pareto set of the two
EI values.  Running the same search on an uncalibrated and a calibrated
ensemble shows how the rescaled uncertainty moves the next query candidates.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .ensemble import Ensemble, predict_batch
from .errors import ConfigurationError, DomainError


def expected_improvement(mu, sigma, f_best, maximize: bool = True):
    """Closed-form EI of ``N(mu, sigma^2)`` over the incumbent ``f_best``.

    ``sigma == 0`` gives the deterministic improvement ``max(mu - f_best, 0)``.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise DomainError("sigma must be non-negative")
    gain = mu - f_best if maximize else f_best - mu
    gain, sigma = np.broadcast_arrays(gain, sigma)
    shape = gain.shape
    gain, sigma = gain.ravel(), sigma.ravel()
    out = np.maximum(gain, 0.0)
    pos = sigma > 0
    z = gain[pos] / sigma[pos]
    out[pos] = gain[pos] * norm.cdf(z) + sigma[pos] * norm.pdf(z)
    out = np.maximum(out, 0.0).reshape(shape)
    return out if out.ndim else float(out)


# --- NSGA-II ---------------------------------------------------------------

@dataclass(frozen=True)
class Nsga2Config:
    lower: tuple
    upper: tuple
    pop_size: int = 100
    generations: int = 100
    crossover_prob: float = 0.9
    crossover_eta: float = 15.0
    mutation_prob: float | None = None  # None -> 1 / n_var
    mutation_eta: float = 20.0
    seed: int = 0

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1 or lo.size == 0:
            raise ConfigurationError("bounds must be two equal-length vectors")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo < hi)):
            raise ConfigurationError("bounds must be finite with lower < upper")
        if self.pop_size < 4 or self.pop_size % 2:
            raise ConfigurationError("population size must be even and >= 4")
        object.__setattr__(self, "lower", tuple(lo.tolist()))
        object.__setattr__(self, "upper", tuple(hi.tolist()))


@dataclass
class ParetoSet:
    """Final non-dominated designs ``X`` and their objective values ``F``."""

    X: np.ndarray
    F: np.ndarray
    stats: list = field(default_factory=list)

    def __len__(self):
        return len(self.X)


def dominates(a, b) -> bool:
    """``a`` dominates ``b`` under minimisation."""
    return bool(np.all(a <= b) and np.any(a < b))


def non_dominated_sort(F) -> list[np.ndarray]:
    """Fronts (lists of row indices) of ``F`` under minimisation, best first."""
    F = np.asarray(F, dtype=float)
    n = len(F)
    le = np.all(F[:, None, :] <= F[None, :, :], axis=2)
    lt = np.any(F[:, None, :] < F[None, :, :], axis=2)
    dom = le & lt  # dom[i, j]: i dominates j
    counts = dom.sum(axis=0)
    fronts = []
    current = np.flatnonzero(counts == 0)
    assigned = np.zeros(n, dtype=bool)
    while current.size:
        fronts.append(current)
        assigned[current] = True
        counts = counts - dom[current].sum(axis=0)
        current = np.flatnonzero((counts == 0) & ~assigned)
    return fronts


def crowding_distance(F) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    n, m = F.shape
    dist = np.zeros(n)
    if n <= 2:
        dist[:] = np.inf
        return dist
    for j in range(m):
        order = np.argsort(F[:, j], kind="stable")
        f = F[order, j]
        span = f[-1] - f[0]
        dist[order[0]] = dist[order[-1]] = np.inf
        if span > 0:
            dist[order[1:-1]] += (f[2:] - f[:-2]) / span
    return dist


def _rank_and_crowd(F):
    rank = np.empty(len(F), dtype=int)
    crowd = np.empty(len(F))
    fronts = non_dominated_sort(F)
    for r, idx in enumerate(fronts):
        rank[idx] = r
        crowd[idx] = crowding_distance(F[idx])
    return rank, crowd, fronts


def _tournament(rng, rank, crowd, n):
    a = rng.integers(0, len(rank), n)
    b = rng.integers(0, len(rank), n)
    a_wins = (rank[a] < rank[b]) | ((rank[a] == rank[b]) & (crowd[a] >= crowd[b]))
    return np.where(a_wins, a, b)


def _sbx(rng, p1, p2, lo, hi, eta, prob):
    """Simulated binary crossover with bound-aware spread factors (Deb & Agrawal)."""
    c1, c2 = p1.copy(), p2.copy()
    n, d = p1.shape
    do_pair = rng.random(n) < prob
    do_var = (rng.random((n, d)) < 0.5) & do_pair[:, None] & (np.abs(p1 - p2) > 1e-14)
    y1 = np.minimum(p1, p2)
    y2 = np.maximum(p1, p2)
    delta = np.where(do_var, y2 - y1, 1.0)
    u = rng.random((n, d))

    def child(beta_bound_num):
        beta = 1.0 + 2.0 * beta_bound_num / delta
        alpha = 2.0 - beta ** (-(eta + 1.0))
        betaq = np.where(
            u <= 1.0 / alpha,
            (u * alpha) ** (1.0 / (eta + 1.0)),
            (1.0 / np.maximum(2.0 - u * alpha, 1e-300)) ** (1.0 / (eta + 1.0)),
        )
        return betaq

    bq1 = child(y1 - lo)
    k1 = 0.5 * ((y1 + y2) - bq1 * delta)
    bq2 = child(hi - y2)
    k2 = 0.5 * ((y1 + y2) + bq2 * delta)
    k1 = np.clip(k1, lo, hi)
    k2 = np.clip(k2, lo, hi)
    swap = rng.random((n, d)) < 0.5
    a = np.where(swap, k2, k1)
    b = np.where(swap, k1, k2)
    c1 = np.where(do_var, a, c1)
    c2 = np.where(do_var, b, c2)
    return c1, c2


def _polynomial_mutation(rng, X, lo, hi, eta, prob):
    X = X.copy()
    mask = rng.random(X.shape) < prob
    span = hi - lo
    d1 = (X - lo) / span
    d2 = (hi - X) / span
    u = rng.random(X.shape)
    p = 1.0 / (eta + 1.0)
    left = u < 0.5
    xy1 = 1.0 - d1
    xy2 = 1.0 - d2
    val_l = 2.0 * u + (1.0 - 2.0 * u) * xy1 ** (eta + 1.0)
    val_r = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * xy2 ** (eta + 1.0)
    deltaq = np.where(left, val_l ** p - 1.0, 1.0 - val_r ** p)
    X = np.where(mask, X + deltaq * span, X)
    return np.clip(X, lo, hi)


def nsga2(fitness, config: Nsga2Config) -> ParetoSet:
    """Minimise a vector objective over a box with NSGA-II.

    ``fitness`` maps an ``(n, d)`` array of designs to ``(n, m)`` objectives.
    Returns the first non-dominated front of the final population.
    """
    rng = np.random.default_rng(config.seed)
    lo = np.asarray(config.lower)
    hi = np.asarray(config.upper)
    d = lo.size
    pm = config.mutation_prob if config.mutation_prob is not None else 1.0 / d
    N = config.pop_size

    X = lo + rng.random((N, d)) * (hi - lo)
    F = np.asarray(fitness(X), dtype=float)
    rank, crowd, _ = _rank_and_crowd(F)
    stats = []
    for gen in range(config.generations):
        parents = _tournament(rng, rank, crowd, N)
        p1, p2 = X[parents[0::2]], X[parents[1::2]]
        c1, c2 = _sbx(rng, p1, p2, lo, hi, config.crossover_eta, config.crossover_prob)
        kids = _polynomial_mutation(rng, np.vstack([c1, c2]), lo, hi, config.mutation_eta, pm)
        Fk = np.asarray(fitness(kids), dtype=float)

        X_all = np.vstack([X, kids])
        F_all = np.vstack([F, Fk])
        rank_all, crowd_all, fronts = _rank_and_crowd(F_all)
        keep = []
        for front in fronts:
            if len(keep) + len(front) <= N:
                keep.extend(front.tolist())
            else:
                order = np.argsort(-crowd_all[front], kind="stable")
                keep.extend(front[order[: N - len(keep)]].tolist())
                break
        keep = np.asarray(keep)
        X, F = X_all[keep], F_all[keep]
        rank, crowd = rank_all[keep], crowd_all[keep]
        stats.append({"generation": gen + 1, "front_size": int(np.sum(rank == 0)),
                      "best": F[rank == 0].min(axis=0).tolist()})

    first = non_dominated_sort(F)[0]
    return ParetoSet(X[first].copy(), F[first].copy(), stats)


def hypervolume_2d(F, ref) -> float:
    """Area dominated by a two-objective (minimisation) point set up to ``ref``."""
    F = np.asarray(F, dtype=float)
    ref = np.asarray(ref, dtype=float)
    F = F[np.all(F < ref, axis=1)]
    if len(F) == 0:
        return 0.0
    F = F[np.argsort(F[:, 0], kind="stable")]
    area = 0.0
    best_f2 = ref[1]
    for f1, f2 in F:
        if f2 < best_f2:
            area += (ref[0] - f1) * (best_f2 - f2)
            best_f2 = f2
    return float(area)


# --- the BO step -------------------------------------------------------------

@dataclass(frozen=True)
class AcquisitionSpec:
    objectives: tuple  # two output indices
    f_best: tuple
    maximize: tuple = (True, True)

    def validate(self, n_outputs: int):
        if len(self.objectives) != 2 or len(set(self.objectives)) != 2:
            raise ConfigurationError("need two distinct objective indices")
        if any(not 0 <= k < n_outputs for k in self.objectives):
            raise ConfigurationError(f"objective index out of range for {n_outputs} outputs")
        if len(self.f_best) != 2 or len(self.maximize) != 2:
            raise ConfigurationError("f_best and maximize need one entry per objective")


def acquisition_spec_from_training(Y_train, objectives=(0, 1), maximize=(True, True)):
    """Incumbent per objective is the best training output."""
    Y_train = np.asarray(Y_train, dtype=float)
    f_best = tuple(float(Y_train[:, k].max() if mx else Y_train[:, k].min())
                   for k, mx in zip(objectives, maximize))
    return AcquisitionSpec(tuple(objectives), f_best, tuple(maximize))


def ei_objectives(ensemble: Ensemble, spec: AcquisitionSpec):
    """Vectorised fitness: designs -> ``-EI`` per objective (for minimisation)."""

    def fitness(X):
        dist = predict_batch(ensemble, X)
        cols = []
        for k, fb, mx in zip(spec.objectives, spec.f_best, spec.maximize):
            cols.append(-expected_improvement(dist.mu_hat[:, k], np.sqrt(dist.var_total[:, k]), fb, mx))
        return np.stack(cols, axis=1)

    return fitness


@dataclass
class BoStepResult:
    before: ParetoSet
    after: ParetoSet
    spec: AcquisitionSpec
    config: Nsga2Config
    input_names: tuple = ()
    output_names: tuple = ()

    @staticmethod
    def ei(front: ParetoSet) -> np.ndarray:
        return -front.F

    def max_ei(self) -> dict:
        return {
            "before": self.ei(self.before).max(axis=0).tolist(),
            "after": self.ei(self.after).max(axis=0).tolist(),
        }

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        names_in = list(self.input_names) or [f"x{i}" for i in range(self.before.X.shape[1])]
        obj = [self.output_names[k] if self.output_names else f"y{k}" for k in self.spec.objectives]
        for tag, front in (("before", self.before), ("after", self.after)):
            with open(d / f"pareto_{tag}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow([f"EI_{o}" for o in obj])
                for row in self.ei(front):
                    w.writerow([repr(float(v)) for v in row])
            with open(d / f"pcp_{tag}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(names_in)
                for row in front.X:
                    w.writerow([repr(float(v)) for v in row])
        manifest = {
            "objectives": obj,
            "f_best": list(self.spec.f_best),
            "maximize": list(self.spec.maximize),
            "nsga2": asdict(self.config),
            "max_ei": self.max_ei(),
            "front_sizes": {"before": len(self.before), "after": len(self.after)},
        }
        (d / "bo_manifest.json").write_text(json.dumps(manifest, indent=2))


def bo_step(ensemble_before: Ensemble, ensemble_after: Ensemble, spec: AcquisitionSpec,
            config: Nsga2Config, input_names=(), output_names=()) -> BoStepResult:
    """Run the EI Pareto search once per ensemble with the same seed."""
    spec.validate(ensemble_before.output_dim)
    before = nsga2(ei_objectives(ensemble_before, spec), config)
    after = nsga2(ei_objectives(ensemble_after, spec), config)
    return BoStepResult(before, after, spec, config, tuple(input_names), tuple(output_names))

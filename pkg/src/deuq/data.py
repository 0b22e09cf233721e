"""Synthetic five-input / six-output regression task.

Inputs are flight conditions (Mach number, roll angle, pitch and roll fin
deflections, angle of attack) on a full-factorial grid; six smooth analytic
responses, named like force and moment coefficients, are the outputs.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

INPUT_NAMES = ("Ma", "phi", "dp", "dr", "AoA")
OUTPUT_NAMES = ("CNF", "CAF", "CPM", "CRM", "CYM", "CSF")
INPUT_BOUNDS = {
    "Ma": (1.1, 3.0),
    "phi": (-90.0, 0.0),
    "dp": (-20.0, 20.0),
    "dr": (-10.0, 0.0),
    "AoA": (-3.0, 23.0),
}
DESK_LEVELS = (7, 5, 5, 4, 7)  # 4900 rows
FULL_LEVELS = (7, 5, 5, 4, 14)  # 9800 rows
MAX_GRID_ROWS = 2_000_000


@dataclass(frozen=True)
class InputSpace:
    names: tuple = INPUT_NAMES
    lower: tuple = tuple(INPUT_BOUNDS[n][0] for n in INPUT_NAMES)
    upper: tuple = tuple(INPUT_BOUNDS[n][1] for n in INPUT_NAMES)

    def __post_init__(self):
        if not (len(self.names) == len(self.lower) == len(self.upper)):
            raise ConfigurationError("names and bounds differ in length")
        for n, lo, hi in zip(self.names, self.lower, self.upper):
            if not lo < hi:
                raise ConfigurationError(f"bad bounds for {n}: [{lo}, {hi}]")

    def to_unit(self, X):
        """Map raw inputs onto [-1, 1] per column."""
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        return 2.0 * (np.asarray(X, dtype=float) - lo) / (hi - lo) - 1.0

    def from_unit(self, U):
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        return lo + (np.asarray(U, dtype=float) + 1.0) * (hi - lo) / 2.0


@dataclass(frozen=True)
class GeneratorSpec:
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.noise < 0:
            raise ConfigurationError("noise amplitude must be non-negative")


def full_factorial(levels, space: InputSpace = InputSpace(), cap: int = MAX_GRID_ROWS):
    """Cartesian grid over the box, first variable varying slowest."""
    levels = tuple(int(n) for n in levels)
    if len(levels) != len(space.names):
        raise ConfigurationError(f"need {len(space.names)} level counts, got {len(levels)}")
    if any(n < 2 for n in levels):
        raise ConfigurationError("every variable needs at least 2 levels")
    if math.prod(levels) > cap:
        raise ConfigurationError(f"grid of {math.prod(levels)} rows exceeds cap {cap}")
    axes = [np.linspace(lo, hi, n) for lo, hi, n in zip(space.lower, space.upper, levels)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def response_surface(U):
    """Noise-free responses on unit-scaled inputs ``U`` in [-1, 1]^5.

    ====  =====================================================
    CNF   sin(1.5 aoa) + 0.3 ma*aoa + 0.2 dp
    CAF   0.5 + 0.4 ma^2 - 0.2 aoa^2 + 0.1 cos(pi dp)
    CPM   -0.8 sin(1.5 aoa) + 0.4 dp + 0.2 ma*dp
    CRM   0.3 sin(pi phi) dr + 0.2 dr
    CYM   0.4 cos(pi phi / 2) dp*aoa + 0.1 phi
    CSF   0.5 sin(pi phi) aoa + 0.2 phi*dr
    ====  =====================================================
    """
    U = np.atleast_2d(np.asarray(U, dtype=float))
    ma, phi, dp, dr, aoa = U.T
    pi = math.pi
    return np.stack(
        [
            np.sin(1.5 * aoa) + 0.3 * ma * aoa + 0.2 * dp,
            0.5 + 0.4 * ma**2 - 0.2 * aoa**2 + 0.1 * np.cos(pi * dp),
            -0.8 * np.sin(1.5 * aoa) + 0.4 * dp + 0.2 * ma * dp,
            0.3 * np.sin(pi * phi) * dr + 0.2 * dr,
            0.4 * np.cos(pi * phi / 2) * dp * aoa + 0.1 * phi,
            0.5 * np.sin(pi * phi) * aoa + 0.2 * phi * dr,
        ],
        axis=1,
    )


@functools.cache
def response_scale() -> np.ndarray:
    """Spread (standard deviation) of each response over the unit box.

    Estimated once on a 9-level full factorial of [-1, 1]^5.
    """
    axes = [np.linspace(-1.0, 1.0, 9)] * 5
    U = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
    scale = response_surface(U).std(axis=0)
    scale.setflags(write=False)
    return scale


def noise_std(U, amplitude: float):
    """Heteroscedastic noise level per row and output.

    ``amplitude * (1 + |u_Ma|)`` in units of each response's spread, so the
    amplitude reads as a fraction of a standardised output.
    """
    U = np.atleast_2d(np.asarray(U, dtype=float))
    return amplitude * (1.0 + np.abs(U[:, 0]))[:, None] * response_scale()[None, :]


def synth_outputs(X, spec: GeneratorSpec = GeneratorSpec(), space: InputSpace = InputSpace()):
    """Six noisy responses for raw inputs ``X``; pure in (X, spec)."""
    U = space.to_unit(X)
    Y = response_surface(U)
    if spec.noise > 0:
        rng = np.random.default_rng(spec.seed)
        Y = Y + rng.standard_normal(Y.shape) * noise_std(U, spec.noise)
    return Y


@dataclass
class Dataset:
    X_raw: np.ndarray
    Y_raw: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    split_seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def X(self):
        return self.standardize_x(self.X_raw)

    @property
    def Y(self):
        return self.standardize_y(self.Y_raw)

    def standardize_x(self, X):
        return (np.asarray(X, dtype=float) - self.x_mean) / self.x_std

    def unstandardize_x(self, Z):
        return np.asarray(Z, dtype=float) * self.x_std + self.x_mean

    def standardize_y(self, Y):
        return (np.asarray(Y, dtype=float) - self.y_mean) / self.y_std

    def unstandardize_y(self, Z):
        return np.asarray(Z, dtype=float) * self.y_std + self.y_mean

    def part(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Standardized ``(X, Y)`` of one split: ``train``, ``val`` or ``test``."""
        idx = {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[name]
        return self.standardize_x(self.X_raw[idx]), self.standardize_y(self.Y_raw[idx])

    def manifest(self) -> dict:
        return {
            "n_rows": int(len(self.X_raw)),
            "split_seed": self.split_seed,
            "sizes": {
                "train": int(len(self.train_idx)),
                "val": int(len(self.val_idx)),
                "test": int(len(self.test_idx)),
            },
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "y_mean": self.y_mean.tolist(),
            "y_std": self.y_std.tolist(),
            **self.meta,
        }

    def save(self, directory) -> None:
        """CSV per split plus ``manifest.json``; columns are inputs then outputs."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        header = ",".join(INPUT_NAMES + OUTPUT_NAMES)
        full = np.hstack([self.X_raw, self.Y_raw])
        np.savetxt(d / "data.csv", full, delimiter=",", header=header, comments="", fmt="%.17g")
        for name, idx in (("train", self.train_idx), ("val", self.val_idx), ("test", self.test_idx)):
            np.savetxt(d / f"{name}.csv", full[idx], delimiter=",", header=header,
                       comments="", fmt="%.17g")
        m = self.manifest()
        m["train_idx"] = self.train_idx.tolist()
        m["val_idx"] = self.val_idx.tolist()
        m["test_idx"] = self.test_idx.tolist()
        (d / "manifest.json").write_text(json.dumps(m, indent=2))

    @classmethod
    def load(cls, directory, parts=("train", "val", "test")) -> "Dataset":
        """Reload a saved dataset.

        Only the CSV files named in ``parts`` are read; rows of other splits
        are left as NaN so a caller cannot use them by accident.
        """
        d = Path(directory)
        m = json.loads((d / "manifest.json").read_text())
        n = m["n_rows"]
        nx = len(m["x_mean"])
        X = np.full((n, nx), np.nan)
        Y = np.full((n, len(m["y_mean"])), np.nan)
        idx = {p: np.asarray(m[f"{p}_idx"], dtype=int) for p in ("train", "val", "test")}
        for p in parts:
            rows = np.loadtxt(d / f"{p}.csv", delimiter=",", skiprows=1, ndmin=2)
            X[idx[p]] = rows[:, :nx]
            Y[idx[p]] = rows[:, nx:]
        meta = {k: v for k, v in m.items()
                if k not in {"n_rows", "split_seed", "sizes", "x_mean", "x_std", "y_mean",
                             "y_std", "train_idx", "val_idx", "test_idx"}}
        return cls(X, Y, idx["train"], idx["val"], idx["test"],
                   np.asarray(m["x_mean"]), np.asarray(m["x_std"]),
                   np.asarray(m["y_mean"]), np.asarray(m["y_std"]), m["split_seed"], meta)


def split(X, Y, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> Dataset:
    """Seeded shuffle, contiguous 8:1:1 cut, train-only standardization."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ConfigurationError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(X)
    if len(Y) != n:
        raise ConfigurationError("X and Y have different row counts")
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise ConfigurationError(f"empty split: {n_train}/{n_val}/{n_test}")
    perm = np.random.default_rng(seed).permutation(n)
    tr, va, te = perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
    x_std = X[tr].std(axis=0)
    y_std = Y[tr].std(axis=0)
    x_std[x_std == 0] = 1.0
    y_std[y_std == 0] = 1.0
    return Dataset(X, Y, tr, va, te, X[tr].mean(axis=0), x_std, Y[tr].mean(axis=0), y_std, seed)


def make_dataset(levels=DESK_LEVELS, noise: float = 0.02, seed: int = 0,
                 ratios=(0.8, 0.1, 0.1)) -> Dataset:
    """Grid, responses and split in one call; all randomness derives from ``seed``."""
    space = InputSpace()
    gen = GeneratorSpec(noise=noise, seed=seed)
    X = full_factorial(levels, space)
    Y = synth_outputs(X, gen, space)
    ds = split(X, Y, ratios, seed)
    ds.meta = {
        "levels": list(levels),
        "bounds": {n: list(INPUT_BOUNDS[n]) for n in INPUT_NAMES},
        "generator": asdict(gen),
        "ratios": list(ratios),
        "inputs": list(INPUT_NAMES),
        "outputs": list(OUTPUT_NAMES),
    }
    return ds

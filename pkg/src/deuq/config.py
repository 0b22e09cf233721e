"""Run configuration: a TOML file with one table per pipeline stage.

Every key has a desk-scale default.  Where the full-scale setting differs it
is noted next to the field.
"""

from __future__ import annotations

import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigurationError


@dataclass
class PathsConfig:
    data_dir: str = "run/data"
    model_dir: str = "run/models"
    report_dir: str = "run/reports"


@dataclass
class DataConfig:
    levels: list = field(default_factory=lambda: [7, 5, 5, 4, 7])  # full scale: 9800 rows
    noise: float = 0.02
    ratios: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    seed: int = 0


@dataclass
class EnsembleSection:
    models: list = field(default_factory=lambda: [2, 4, 8, 16])
    epochs: int = 3000  # full scale: 13000
    batch_size: int = 128  # full scale: 512
    hidden: list = field(default_factory=lambda: [64, 64, 64])  # full scale: 7 x 128
    lr: float = 1e-3
    slope: float = 0.01
    seed: int = 0
    n_jobs: int = 1
    nested: bool = False  # train the largest ensemble once and slice the rest


@dataclass
class GprSection:
    enabled: bool = True
    rounds: int = 3
    points: int = 9
    max_search_points: int = 1000
    include_noise: bool = True


@dataclass
class CalibrationSection:
    lo: float = -2.0  # candidates 10^lo .. 10^hi
    hi: float = 0.18
    n: int = 100
    include_identity: bool = True


@dataclass
class MetricsSection:
    levels: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(1, 10)])
    bins: int = 20
    sort_by: str = "y"


@dataclass
class BoSection:
    model: int = 0  # 0 -> largest trained ensemble
    objectives: list = field(default_factory=lambda: ["CNF", "CAF"])
    pop_size: int = 100
    generations: int = 100
    crossover_prob: float = 0.9
    crossover_eta: float = 15.0
    mutation_eta: float = 20.0
    seed: int = 0


@dataclass
class GridsearchSection:
    layers: list = field(default_factory=lambda: [2, 3])  # full scale: 3, 5, 7
    nodes: list = field(default_factory=lambda: [32, 64])  # full scale: 32, 64, 128
    batch_sizes: list = field(default_factory=lambda: [64, 128])  # full scale: 512, 1024, 2048
    epochs: int = 300
    lr: float = 3e-3
    seed: int = 0


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    gpr: GprSection = field(default_factory=GprSection)
    calibration: CalibrationSection = field(default_factory=CalibrationSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    bo: BoSection = field(default_factory=BoSection)
    gridsearch: GridsearchSection = field(default_factory=GridsearchSection)

    def validate(self) -> "RunConfig":
        r = self.data.ratios
        if len(r) != 3 or any(x < 0 for x in r) or not math.isclose(sum(r), 1.0):
            raise ConfigurationError(f"data.ratios must be three non-negative numbers summing to 1, got {r}")
        if not self.ensemble.models and not self.gpr.enabled:
            raise ConfigurationError("ensemble.models must list at least one ensemble size")
        if any(int(m) < 1 for m in self.ensemble.models):
            raise ConfigurationError("ensemble sizes must be >= 1")
        if self.metrics.bins < 1:
            raise ConfigurationError("metrics.bins must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        cfg = cls()
        for f in fields(cls):
            section = doc.get(f.name, {})
            if not isinstance(section, dict):
                raise ConfigurationError(f"[{f.name}] must be a table")
            current = getattr(cfg, f.name)
            known = {g.name for g in fields(current)}
            unknown = set(section) - known
            if unknown:
                raise ConfigurationError(f"unknown keys in [{f.name}]: {sorted(unknown)}")
            setattr(cfg, f.name, replace(current, **section))
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(doc)

    def with_out(self, out) -> "RunConfig":
        out = Path(out)
        self.paths = PathsConfig(str(out / "data"), str(out / "models"), str(out / "reports"))
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        self.data.seed = seed
        self.ensemble.seed = seed
        self.bo.seed = seed
        self.gridsearch.seed = seed
        return self

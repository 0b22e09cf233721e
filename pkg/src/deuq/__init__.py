"""Deep-ensemble uncertainty quantification for multi-output regression."""

from .calibration import apply_scaling, fit_std_scaling
from .data import Dataset, full_factorial, split, synth_outputs
from .ensemble import Ensemble, EnsembleConfig, PredictiveDist, predict, predict_batch, train_ensemble
from .errors import (
    ConfigurationError,
    DeuqError,
    DomainError,
    IllConditionedKernelError,
    InputShapeError,
    TrainingDivergedError,
)
from .nn import ProbNet, forward, nll_loss

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "Dataset",
    "DeuqError",
    "DomainError",
    "Ensemble",
    "EnsembleConfig",
    "IllConditionedKernelError",
    "InputShapeError",
    "PredictiveDist",
    "ProbNet",
    "TrainingDivergedError",
    "apply_scaling",
    "fit_std_scaling",
    "forward",
    "full_factorial",
    "nll_loss",
    "predict",
    "predict_batch",
    "split",
    "synth_outputs",
    "train_ensemble",
]

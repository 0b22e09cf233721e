"""Exception hierarchy."""


class DeuqError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(DeuqError, ValueError):
    """Invalid configuration (empty grid, bad ratios, too many bins...)."""


class DomainError(DeuqError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class InputShapeError(DeuqError, ValueError):
    """Array dimensions do not match what the model expects."""


class TrainingDivergedError(DeuqError, RuntimeError):
    def __init__(self, member: int, epoch: int, loss: float):
        self.member = member
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"member {member} diverged at epoch {epoch} (loss={loss!r})")


class IllConditionedKernelError(DeuqError, RuntimeError):
    """Cholesky factorisation failed even at the maximum jitter."""

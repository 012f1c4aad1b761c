from typing import Optional


class LoadSynthError(Exception):
    """Base class for every error raised by the package."""


class DatasetError(LoadSynthError, ValueError):
    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        self.row = row
        self.column = column
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column {column}")
        prefix = f"{', '.join(location)}: " if location else ""
        super().__init__(f"{prefix}{message}")


class DatasetNotFoundError(LoadSynthError, FileNotFoundError):
    pass


class ShapeMismatchError(LoadSynthError, ValueError):
    pass


class NonFiniteGradientError(LoadSynthError, FloatingPointError):
    pass


class TrainingDivergedError(LoadSynthError):
    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")


class MixtureFitError(LoadSynthError, ValueError):
    pass


class InvalidRequestError(LoadSynthError, ValueError):
    pass


class LayoutMismatchError(LoadSynthError, ValueError):
    pass


class GuardRefusedError(LoadSynthError):
    """Raised when a generation condition targets too small a share of the training households.

    The message names the rule only; it never carries household counts.
    """

    def __init__(self, rule: str, message: str):
        self.rule = rule
        super().__init__(message)


class BudgetExhaustedError(LoadSynthError):
    def __init__(self, accepted: int, attempts: int):
        self.accepted = accepted
        self.attempts = attempts
        self.acceptance_rate = accepted / attempts if attempts else 0.0
        super().__init__(
            f"attempt budget exhausted after {attempts} sampled rows "
            f"(acceptance rate {self.acceptance_rate:.2e})"
        )


class ArtifactError(LoadSynthError, ValueError):
    pass


class ConfigurationError(LoadSynthError, ValueError):
    pass

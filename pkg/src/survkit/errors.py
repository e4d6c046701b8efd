class SurvkitError(Exception):
    """Base class for errors raised by this package."""


class DataError(SurvkitError, ValueError):
    """Malformed or inconsistent input data."""


class NumericalError(SurvkitError, ArithmeticError):
    """Non-finite values encountered during a computation."""


class TrainingDivergence(NumericalError):
    def __init__(self, epoch: int, message: str = "non-finite loss"):
        super().__init__(f"training diverged at epoch {epoch}: {message}")
        self.epoch = epoch

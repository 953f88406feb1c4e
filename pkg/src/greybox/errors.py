"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit with 2,
contract violations with 3, numerical divergence with 4.
"""


class GreyBoxError(Exception):
    """Base class for all package errors."""


class ConfigurationError(GreyBoxError, ValueError):
    """Inconsistent shapes, flags or hyperparameters."""


class ContractError(GreyBoxError, ValueError):
    """A documented precondition of an operation was violated."""


class DivergenceError(GreyBoxError, ArithmeticError):
    """Base class for non-finite values appearing during a computation."""


class IntegrationDiverged(DivergenceError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite state at integration step {step}")


class TrainingDiverged(DivergenceError):
    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss in epoch {epoch}")


class EstimationDiverged(DivergenceError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite objective at estimation step {step}")


class GenerationError(DivergenceError):
    """A data generator produced non-finite values."""

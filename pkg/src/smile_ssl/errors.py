"""Exception types shared across the package.

Each class maps onto one failure category; the CLI turns them into exit codes.
"""


class SmileError(Exception):
    """Base class for every error raised on purpose by this package."""


class ConfigurationError(SmileError, ValueError):
    """Invalid hyperparameter, shape configuration or unknown config key."""


class DimensionError(SmileError, ValueError):
    pass


class BatchTooSmallError(SmileError, ValueError):
    pass


class EmptyInputError(SmileError, ValueError):
    pass


class RankError(SmileError, ValueError):
    pass


class VocabularyError(SmileError, KeyError):
    pass


class NumericError(SmileError, ArithmeticError):
    pass


class TapeError(SmileError, RuntimeError):
    """Backward pass requested on a graph that was already consumed."""


class DivergenceError(SmileError, RuntimeError):
    def __init__(self, message: str, component: str):
        super().__init__(message)
        self.component = component

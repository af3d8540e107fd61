"""Exception hierarchy shared by every module."""


class CvsegError(Exception):
    """Base class for library errors."""


class DimensionError(CvsegError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(CvsegError, ValueError):
    """A scalar hyperparameter is outside its valid range."""


class ContractError(CvsegError, ValueError):
    """A precondition on the inputs of an operation is violated."""


class DegenerateAtomError(CvsegError, ArithmeticError):
    """A dictionary atom received zero total code weight."""


class NonFiniteError(CvsegError, FloatingPointError):
    """An operation produced NaN or Inf."""


class ConfigError(CvsegError, ValueError):
    """An experiment configuration failed validation."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DivergenceError(CvsegError, RuntimeError):
    """Training produced a non-finite loss."""

"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An array argument has the wrong dimensionality or width."""


class DataError(ValueError):
    """Input data is invalid (non-finite values, impossible generation request)."""


class ContractError(RuntimeError):
    """A call violated an ordering or precondition contract."""


class NotFoundError(KeyError):
    """A referenced task, head, or test set does not exist."""


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or out of range."""


class ParseError(ValueError):
    """A data file could not be parsed; message carries byte offsets where known."""


class NonFiniteGradientError(ArithmeticError):
    """An SGD step was aborted because a gradient buffer contains NaN or Inf."""

"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ConfigError(ValueError):
    """A structural argument (kernel size, factor, enum value, config key) is invalid."""


class NonFiniteError(ArithmeticError):
    """A forward operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """The gradient tape was misused (empty, already consumed, or disconnected)."""

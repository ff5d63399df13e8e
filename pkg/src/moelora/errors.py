"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """A numeric argument is outside the operation's domain."""


class ConfigError(ValueError):
    """A configuration value violates its contract."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient.

    Carries whatever metrics were collected before the abort so callers
    can persist a partial record.
    """

    def __init__(self, message: str, metrics=None):
        super().__init__(message)
        self.metrics = metrics

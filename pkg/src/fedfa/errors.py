"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or mismatched inputs (dimension, payload mode, ...)."""


class DivergenceError(FloatingPointError):
    """A parameter vector became non-finite during training or aggregation."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step

"""Exception types shared across stages; the CLI maps them to exit codes."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (exit code 2)."""


class MissingDependencyError(RuntimeError):
    """A stage's input artifact is absent (exit code 3)."""

    def __init__(self, message: str, producer: str | None = None):
        super().__init__(message)
        self.producer = producer


class NumericalError(FloatingPointError):
    """Non-finite loss or gradient; the offending step was not applied (exit code 4)."""


class DegenerateInputError(ValueError):
    """Input for which an estimator is undefined (e.g. zero median)."""


class EmptySplitError(ValueError):
    """No valid pixels to evaluate."""

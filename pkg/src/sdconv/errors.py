"""Exception types shared across the library."""


class ParameterError(ValueError):
    """An operation was called with arguments violating its preconditions."""


class UnsupportedKindError(ParameterError):
    """A smoothing-filter kind is not supported by the requested code path."""


class GenerationError(RuntimeError):
    """Synthetic-data generation could not satisfy its packing constraints."""


class TrainingError(RuntimeError):
    """Training diverged; carries the step at which it happened."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class ConfigError(ValueError):
    """A run-config file is malformed or contains unknown keys."""


class IoError(OSError):
    """A referenced path cannot be read or written."""

"""Exception types raised across the package."""


class PoelaError(Exception):
    """Base class for all package errors."""


class DatasetError(PoelaError, ValueError):
    """Invalid logged data: parse failures and invariant violations."""

    def __init__(self, message, *, line=None, trajectory=None, field=None):
        parts = []
        if line is not None:
            parts.append(f"line {line}")
        if trajectory is not None:
            parts.append(f"trajectory {trajectory}")
        if field is not None:
            parts.append(f"field {field!r}")
        prefix = ", ".join(parts)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.reason = message
        self.line = line
        self.trajectory = trajectory
        self.field = field


class NoOverlapError(PoelaError):
    """Every truncated importance weight is zero, so no self-normalized estimate exists."""


class UnsupportedInputError(PoelaError):
    """The operation is not defined for this kind of input."""


class BootstrapUnstableError(PoelaError):
    """Too many bootstrap resamples failed to produce an estimate."""


class TrainingError(PoelaError):
    """A training run could not continue."""

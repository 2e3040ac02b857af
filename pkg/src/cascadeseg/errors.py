"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes violate an operator's contract."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Malformed dataset on disk or in memory."""


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


class TrainingError(RuntimeError):
    """Training aborted (NaN gradients/loss or inconsistent setup)."""

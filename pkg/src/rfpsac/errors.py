"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes (or channel counts) do not fit the operation."""


class GeometryError(ValueError):
    """Requested spatial geometry is impossible (e.g. empty output window)."""


class UsageError(RuntimeError):
    """The API was called in an unsupported way."""


class ConfigError(ValueError):
    """A configuration document or value is invalid."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not fit the target model."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step

class InvalidInputError(ValueError):
    """Raised when an argument violates a shape, range or size precondition."""


class DegenerateInputError(InvalidInputError):
    """Raised when geometry is too degenerate to rasterize (e.g. < 3 keypoints)."""


class ConfigError(ValueError):
    pass


class IncompatibleCheckpointError(ValueError):
    pass


class NumericError(RuntimeError):
    """A training loss became non-finite."""

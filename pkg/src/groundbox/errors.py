"""Exception types shared across the package."""


class GroundboxError(Exception):
    """Base class for errors raised by this package."""


class FormatError(GroundboxError):
    """A file does not conform to one of the documented formats."""


class ShapeMismatch(GroundboxError):
    """Tensor or grid shapes are incompatible for the requested operation."""


class TrainingDiverged(GroundboxError):
    """Training produced a non-finite loss and was aborted."""

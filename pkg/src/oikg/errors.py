"""Exception types shared across the package."""


class OikgError(Exception):
    """Base class for all package errors."""


class InvalidArgument(OikgError, ValueError):
    """An argument violates a documented precondition."""


class ShapeError(OikgError, ValueError):
    """Tensor shapes do not agree for the requested operation."""


class SchemaError(OikgError, ValueError):
    """A data file or in-memory structure violates its schema."""


class DegeneratePose(InvalidArgument):
    """Relative pose requested between coincident points."""


class IllegalAction(OikgError, ValueError):
    """The chosen action is not navigable from the current state."""


class GenerationFailure(OikgError, RuntimeError):
    """A seeded generator exhausted its retry budget."""


class InvalidState(OikgError, RuntimeError):
    """Operation called on an object in the wrong state."""


class NumericFailure(OikgError, RuntimeError):
    """A non-finite value appeared where finiteness is required."""


class IncompatibleCheckpoint(OikgError, ValueError):
    """Checkpoint contents do not match the requested configuration."""

class RibCascadeError(Exception):
    """Base class for errors raised by ribcascade."""


class ValidationError(RibCascadeError, ValueError):
    """Input data, files or arguments violate a documented invariant."""

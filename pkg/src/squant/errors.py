"""Exception types shared across the toolkit."""


class SQuantError(Exception):
    """Base class for all toolkit errors."""


class SchemaError(SQuantError):
    """A manifest or spec file does not conform to its schema."""

    def __init__(self, message, field=None):
        if field:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class IntegrityError(SQuantError):
    """Stored data contradicts its manifest (sizes, ranges, shapes)."""


class ValidationError(SQuantError):
    """An in-memory value violates a documented precondition or invariant."""


class GramDegeneracyError(SQuantError):
    """A Gram matrix cannot be decomposed into positive coefficients."""

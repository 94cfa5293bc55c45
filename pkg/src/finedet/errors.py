"""Exception hierarchy shared across modules."""


class FinedetError(Exception):
    """Base class for all package errors."""


class ValidationError(FinedetError, ValueError):
    """Bad input: malformed file, inconsistent shapes, out-of-range values."""


class TaxonomyError(ValidationError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericalError(FinedetError, ArithmeticError):
    """A loss or parameter became non-finite."""

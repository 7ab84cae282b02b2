"""Exception hierarchy shared by all hpfr modules."""


class HPFRError(Exception):
    """Base class for all package errors."""


class SchemaError(HPFRError, ValueError):
    """A required column is missing or a column role is malformed."""


class DataParseError(HPFRError, ValueError):
    """A cell could not be parsed as a finite number."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class DataError(HPFRError, ValueError):
    """Structurally invalid data (duplicates, inconsistent dimensions, ...)."""


class DomainError(HPFRError, ValueError):
    """Evaluation point outside the declared basis domain."""


class NumericalError(HPFRError, ArithmeticError):
    """Factorization failed even after the bounded jitter escalation."""


class MomentError(HPFRError, ArithmeticError):
    """A requested posterior moment of the latent scale does not exist."""

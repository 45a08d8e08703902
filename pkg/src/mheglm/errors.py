"""Exception hierarchy shared by every layer of the package."""


class MHEError(Exception):
    """Base class for all package errors."""


class ParameterError(MHEError, ValueError):
    """Invalid or unsatisfiable parameters."""


class UsageError(MHEError, ValueError):
    """An operation was called on incompatible operands."""


class PrecisionError(MHEError, ArithmeticError):
    """A value or scale no longer fits the available modulus."""


class MustBootstrapError(MHEError):
    """A ciphertext has run out of levels for the requested operation."""


class KeyMissingError(MHEError, KeyError):
    """Evaluation key material for an operation was not generated."""


class ProtocolAbort(MHEError):
    """A distributed protocol could not complete (e.g. a party is unreachable)."""

    def __init__(self, message, phase=None):
        super().__init__(message if phase is None else f"[{phase}] {message}")
        self.phase = phase


class IngestionError(MHEError, ValueError):
    """Malformed input data."""


class FitQualityWarning(UserWarning):
    """Polynomial fit produced suspiciously large coefficients."""

"""Multiparty CKKS for privacy-preserving distributed GLM training and prediction."""
from .ckks import CryptoParams, Evaluator
from .errors import (IngestionError, KeyMissingError, MHEError, MustBootstrapError, ParameterError,
                     PrecisionError, ProtocolAbort, UsageError)

__version__ = "0.1.0"

__all__ = ["CryptoParams", "Evaluator", "IngestionError", "KeyMissingError", "MHEError",
           "MustBootstrapError", "ParameterError", "PrecisionError", "ProtocolAbort", "UsageError"]

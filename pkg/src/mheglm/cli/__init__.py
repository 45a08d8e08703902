"""Command-line surface: configuration, validation, ingestion, reports."""
from .config import RunConfig, preset, validate_params
from .data import load_csv, split
from .metrics import MetricsReport

__all__ = ["RunConfig", "preset", "validate_params", "load_csv", "split", "MetricsReport"]

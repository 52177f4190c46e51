"""Exception hierarchy shared across the pipeline stages."""


class SemidistillError(Exception):
    """Base class for all pipeline failures."""

    stage = "unknown"


class DatasetError(SemidistillError):
    """Raised for missing, truncated or corrupt dataset files."""

    stage = "dataset"


class ConfigError(SemidistillError):
    """Raised for invalid configuration values."""

    stage = "config"


class ModelError(SemidistillError):
    """Raised for unknown architectures or weight/shape mismatches."""

    stage = "model"


class TrainingError(SemidistillError):
    """Raised when a training run cannot proceed (divergence, empty data)."""

    stage = "training"


class ProvenanceError(SemidistillError):
    """Raised when a cached artifact does not match its expected origin."""

    stage = "provenance"


class ReportError(SemidistillError):
    """Raised for unreadable or schema-incompatible ledgers."""

    stage = "report"

from __future__ import annotations


class FixthreshError(Exception):
    """Base class for every error raised by fixthresh."""


class ValidationError(FixthreshError):
    """Raised when an input, file or call contract is invalid (CLI exit code 2)."""


class ConfigError(ValidationError):
    """Raised when the configuration file is invalid or missing required values."""


class ImageIOError(ValidationError):
    """Raised when an image file cannot be read or written."""


class ImageFormatError(ValidationError):
    """Raised when an image file is not a supported PNG or JPEG."""


class ContractError(ValidationError):
    """Raised when a value violates a documented precondition."""


class MetricDomainError(ValidationError):
    """Raised when a metric is undefined for the given scores (e.g. a single class)."""


class ScoreFileError(ValidationError):
    """Raised when a score CSV does not match the documented schema."""


class IntegrityError(ValidationError):
    """Raised when a score CSV contains duplicate (model, seed, id, condition) rows."""


class ModelShapeError(ValidationError):
    """Raised when a tensor does not match the detector configuration."""


class TransformError(FixthreshError):
    """Raised when an image degradation fails (e.g. codec failure)."""


class ProtocolError(FixthreshError):
    """Raised when score sets cannot be evaluated under the fixed-threshold protocol."""


class StatsError(FixthreshError):
    """Raised when seed series cannot be summarized."""


class TrainingError(FixthreshError):
    """Raised when the detector cannot be trained on the given data."""


class GenerationError(FixthreshError):
    """Raised when a synthetic dataset or split cannot be produced."""


class StageError(FixthreshError):
    """Raised when a pipeline stage fails; carries the stage name."""

    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"[{stage}] {message}")
        self.stage = stage

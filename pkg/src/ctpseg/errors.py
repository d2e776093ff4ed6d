"""Exception types shared across the package."""


class PipelineError(Exception):
    """Base class for every error raised by this package."""


class InputValidationError(PipelineError):
    """Invalid user-supplied input: files, configs, or argument values."""


class VolumeFormatError(InputValidationError):
    """Malformed volume bundle: bad header, payload mismatch, bad values."""


class CaseValidationError(InputValidationError):
    """Case directory violates the case contract (missing/inconsistent members)."""


class ConfigError(InputValidationError):
    """Invalid training configuration value or config file."""


class UndefinedMetricError(PipelineError):
    """A metric is undefined for the given inputs (e.g. empty mask)."""


class TrainingDivergedError(PipelineError):
    """Training aborted because the loss became non-finite."""

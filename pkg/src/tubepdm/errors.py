"""Exception types shared across the package."""


class TubePdmError(Exception):
    """Base class for all errors raised by this package."""


class RejectedReadingError(TubePdmError):
    """A sensor reading failed ingestion validation (non-finite value, bad id, ...)."""


class StorageError(TubePdmError):
    """The persistence layer could not be read or written."""


class InvalidRangeError(TubePdmError):
    """A time range query was given t0 > t1."""


class NotFoundError(TubePdmError):
    """A referenced machine, alert, or resource does not exist."""


class InvalidArgumentError(TubePdmError):
    """An argument violates an operation precondition."""


class LogParseError(StorageError):
    """A persisted log line could not be parsed. Carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class LogFormatError(StorageError):
    """A persisted log has an unknown header or unsupported version."""


class MissingStatsError(TubePdmError):
    """Normalization was requested for a parameter with no fitted statistics."""


class DimensionError(TubePdmError):
    """Tensor or vector shapes do not match the model."""


class InvalidDatasetError(TubePdmError):
    """A dataset is empty or otherwise unusable for fitting."""


class ModelFormatError(TubePdmError):
    """A model file does not start with the expected magic bytes."""


class ModelVersionError(ModelFormatError):
    """A model file has an unsupported format version."""


class ModelCorruptionError(TubePdmError):
    """A model file is truncated or fails its checksum."""


class ConfigError(TubePdmError):
    """A configuration file or value is invalid."""

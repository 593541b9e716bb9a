"""Exception hierarchy shared by every module of the package."""


class KAdapterError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(KAdapterError, ValueError):
    pass


class ArgumentError(KAdapterError, ValueError):
    pass


class NumericInputError(KAdapterError, ValueError):
    pass


class UndefinedLossError(KAdapterError, ValueError):
    pass


class ConfigurationError(KAdapterError, ValueError):
    pass


class VocabularyError(KAdapterError, ValueError):
    pass


class LengthError(KAdapterError, ValueError):
    pass


class AnnotationError(KAdapterError, ValueError):
    pass


class ValidationError(KAdapterError, ValueError):
    """A loaded record violates its type invariants."""


class QueryError(KAdapterError, ValueError):
    pass


class MetricError(KAdapterError, ValueError):
    pass


class CheckpointFormatError(KAdapterError):
    """Base for malformed checkpoint files."""


class BadMagicError(CheckpointFormatError):
    pass


class UnsupportedVersionError(CheckpointFormatError):
    pass


class TruncatedCheckpointError(CheckpointFormatError):
    pass


class CorruptCheckpointError(CheckpointFormatError):
    """Header decodes but its entries are inconsistent (overlap, out of bounds)."""

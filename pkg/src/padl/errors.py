"""Exception hierarchy shared by every subpackage."""


class PadlError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PadlError, ValueError):
    """Incompatible tensor shapes or channel counts."""


class RankError(PadlError, ValueError):
    """A scalar was required but a higher-rank tensor was supplied."""


class DegenerateStatisticsError(PadlError, ValueError):
    """Batch statistics computed from fewer than two values."""


class ConfigurationError(PadlError, ValueError):
    pass


class DomainError(PadlError, ValueError):
    """Input values outside the admissible range."""


class DeterminismError(PadlError, RuntimeError):
    pass


class ScheduleError(PadlError, ValueError):
    pass


class GeometryError(PadlError, ValueError):
    """A synthetic shape does not fit inside the image."""


class DegenerateUnionError(PadlError, ValueError):
    pass


class DataError(PadlError, ValueError):
    """Missing or inconsistent annotation data."""


class DatasetIOError(PadlError, OSError):
    pass


class FormatError(PadlError, ValueError):
    """Malformed PGM raster or checkpoint container."""


class VersionError(PadlError, ValueError):
    pass


class CorruptionError(PadlError, ValueError):
    pass


class DivergenceError(PadlError, FloatingPointError):
    """Non-finite loss or gradient during training."""

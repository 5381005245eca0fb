"""Exception hierarchy shared across the package."""


class FeedAlignError(Exception):
    """Base class for every error raised by feedalign."""


class DimensionError(FeedAlignError, ValueError):
    """Operand shapes do not agree."""


class RankError(DimensionError):
    """Operand has the wrong number of axes."""


class GeometryError(FeedAlignError, ValueError):
    """Convolution or pooling geometry is inconsistent."""


class StateError(FeedAlignError, RuntimeError):
    """A layer was used before the state it needs was cached."""


class NumericError(FeedAlignError, ArithmeticError):
    """A non-finite value appeared, or a numeric check failed."""


class DataError(FeedAlignError, ValueError):
    """Bad labels, empty datasets, impossible batch sizes."""


class FormatError(DataError):
    """A file on disk does not follow its binary layout."""


class ConfigError(FeedAlignError, ValueError):
    """Invalid network, strategy or run configuration."""

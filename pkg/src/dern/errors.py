"""Exception hierarchy shared across the package."""


class DernError(Exception):
    """Base class for all package errors."""


class DimensionError(DernError, ValueError):
    """Operand shapes do not agree."""


class ConfigError(DernError, ValueError):
    """A parameter is outside its valid range."""


class NumericalError(DernError, ArithmeticError):
    """A non-finite value appeared, or a computation is undefined."""


class DegenerateClusterError(NumericalError):
    """Clustering cannot proceed because the segment vectors are all zero."""


class FormatError(DernError, ValueError):
    """A model, calibration or stats file could not be parsed."""


class MalformedHeaderError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass

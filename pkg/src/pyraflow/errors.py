"""Exception hierarchy shared by all pyraflow modules."""


class PyraflowError(Exception):
    kind = "error"


class ConfigError(PyraflowError, ValueError):
    """Invalid configuration, shape or architecture."""

    kind = "config"


class FormatError(PyraflowError):
    """Malformed, truncated or checksum-failing file."""

    kind = "format"


class NumericError(PyraflowError, FloatingPointError):
    """Non-finite values where finite ones are required."""

    kind = "numeric"


class MissingPredictionError(FormatError):
    """A prediction directory lacks the flow file for some sample."""

    kind = "missing-prediction"


class ResolutionError(FormatError):
    """Predictions, model and dataset disagree on image size."""

    kind = "resolution"

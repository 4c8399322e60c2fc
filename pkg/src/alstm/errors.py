"""Exception types shared across the package."""


class ALSTMError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ALSTMError, ValueError):
    """Operand shapes do not conform."""


class ParameterError(ALSTMError, ValueError):
    """A hyperparameter or argument is outside its valid range."""


class EmptySupportError(ALSTMError, ValueError):
    """A masked softmax was asked to normalize over zero entries."""


class DataError(ALSTMError, ValueError):
    """Input data is missing, empty or fails validation."""


class ConfigurationError(ALSTMError, ValueError):
    """A model or run configuration is invalid."""


class FormatError(ALSTMError, ValueError):
    """A binary file (WAV, ALSF, checkpoint) is malformed."""


class RateError(ALSTMError, ValueError):
    """Audio sample rate is not supported by the requested operation."""


class LabelIndexError(ALSTMError, IndexError):
    """A class index lies outside [0, k)."""

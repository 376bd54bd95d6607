"""Exception hierarchy shared by every subpackage."""


class MSGLError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MSGLError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(MSGLError, ValueError):
    """A hyperparameter or configuration value is invalid."""


class UsageError(MSGLError, ValueError):
    """An API was called outside its contract."""


class NonFiniteError(MSGLError, FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""


class IngestionError(MSGLError):
    """A dataset file is missing or malformed."""


class FitError(MSGLError, ValueError):
    """Preprocessing statistics could not be fitted."""


class PersistenceError(MSGLError):
    """An artifact or checkpoint file could not be read back."""

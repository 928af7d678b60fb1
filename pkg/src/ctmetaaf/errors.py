"""Exception types shared across the package."""


class CTMetaAFError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CTMetaAFError, ValueError):
    """Invalid sizes, rates or config keys."""


class UsageError(CTMetaAFError, ValueError):
    """An API was called with arguments that violate its contract."""


class NumericError(CTMetaAFError, ArithmeticError):
    """Non-finite values appeared in a computation."""


class GenerationError(CTMetaAFError, RuntimeError):
    """A scene could not be generated as requested."""


class CorpusError(CTMetaAFError, RuntimeError):
    """Manifest rows could not be resolved, or folds leak."""


class CheckpointError(CTMetaAFError, RuntimeError):
    """A checkpoint file is malformed or incompatible."""

"""Exception types shared across the package."""


class CmarlError(Exception):
    """Base class for all package errors."""


class ShapeError(CmarlError, ValueError):
    """An array argument violates a dimension contract."""


class ConfigError(CmarlError, ValueError):
    """Invalid configuration (bad value, unknown key, missing file)."""


class NumericalAbort(CmarlError, RuntimeError):
    """A computation produced non-finite or diverging values.

    Carries an optional ``context`` dict with diagnostics (episode index,
    offending arrays) so callers can dump state before giving up.
    """

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = dict(context) if context else {}


class NonFiniteGradientError(NumericalAbort):
    """A gradient contained NaN or infinity."""


class NonErgodicChainError(CmarlError, ValueError):
    """A stationary distribution was requested for a chain without one."""

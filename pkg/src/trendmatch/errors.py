"""Exception types shared across the package."""


class TrendMatchError(Exception):
    """Base class for all package errors."""


class DimensionError(TrendMatchError, ValueError):
    """A tensor extent does not match what an operation needs.

    ``axis`` names the offending axis (e.g. ``"channel"``, ``"height"``) so
    callers can report exactly which dimension was wrong.
    """

    def __init__(self, message, axis=None, expected=None, got=None):
        self.axis = axis
        self.expected = expected
        self.got = got
        if axis is not None:
            message = f"{message} [axis={axis}, expected={expected}, got={got}]"
        super().__init__(message)


class ConfigError(TrendMatchError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(TrendMatchError, IOError):
    """Dataset on disk is missing, malformed or inconsistent."""


class DivergenceError(TrendMatchError, FloatingPointError):
    """Training produced a non-finite loss."""


class GenerationError(TrendMatchError, RuntimeError):
    """Synthetic scene generation could not place all shapes."""

    def __init__(self, message, seed=None):
        self.seed = seed
        super().__init__(f"{message} (seed={seed})")

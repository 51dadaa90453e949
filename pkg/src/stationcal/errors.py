"""Exception types shared across the package."""


class CalibrationError(Exception):
    """A solver or numerical contract was violated (singular matrix,
    unidentifiable parameter, degenerate geometry, ...)."""


class ConfigError(CalibrationError):
    """An experiment configuration is invalid."""

"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or combination of values."""


class DataError(ValueError):
    """Malformed, missing or inconsistent input data."""


class CheckpointError(DataError):
    """A checkpoint file could not be decoded."""

class HazegenError(Exception):
    """Base class for all package errors."""


class ConfigError(HazegenError, ValueError):
    """Invalid configuration or arguments."""


class DataError(HazegenError):
    """Malformed, missing or inconsistent data on disk or in memory."""


class IncompatibleCheckpointError(HazegenError):
    """Checkpoint does not match the base model it is loaded against."""

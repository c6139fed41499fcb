"""Controllable generative nighttime dehazing at desk scale."""

from hazegen.errors import ConfigError, DataError, HazegenError, IncompatibleCheckpointError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "HazegenError",
    "IncompatibleCheckpointError",
]

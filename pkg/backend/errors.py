"""
Exception hierarchy shared by every tinydet module
"""
from typing import Optional


class TinyDetError(Exception):
    """Base class for all toolkit errors"""


class BoundsError(TinyDetError, ValueError):
    """A region or box lies outside the raster it refers to"""


class ArgumentError(TinyDetError, ValueError):
    """An argument violates the operation's precondition"""


class StateError(TinyDetError, RuntimeError):
    """An EMA state is used before it was seeded, or a key is missing"""


class GenerationError(TinyDetError, RuntimeError):
    """Synthetic scene generation could not satisfy its constraints"""


class ConfigError(TinyDetError, ValueError):
    """Configuration failed schema or range validation"""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


class DatasetIOError(TinyDetError, OSError):
    """Reading or writing a dataset/run artifact failed"""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path


class TrainingError(TinyDetError, RuntimeError):
    """Training produced a non-finite loss or parameter"""

from typing import Any, Dict, Iterable, Optional

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_COLLECTION_TIMEOUT = 4


class SQLossError(Exception):
    """Base class for every failure the lab reports with a dedicated exit code."""

    exit_code = 1


class ConfigError(SQLossError, ValueError):
    exit_code = EXIT_CONFIG


class EpisodeExhaustedError(SQLossError, RuntimeError):
    exit_code = EXIT_CONFIG


class DimensionError(SQLossError, ValueError):
    exit_code = EXIT_CONFIG


class UndefinedIndexError(SQLossError, IndexError):
    exit_code = EXIT_CONFIG


class AlignmentError(SQLossError, ValueError):
    exit_code = EXIT_CONFIG


class NumericalError(SQLossError, ArithmeticError):
    """Non-finite value during training; `snapshot` holds what was last known good."""

    exit_code = EXIT_NUMERICAL

    def __init__(self, message: str, snapshot: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class DegenerateInputError(SQLossError, ValueError):
    exit_code = EXIT_NUMERICAL


class CollectionTimeoutError(SQLossError, TimeoutError):
    exit_code = EXIT_COLLECTION_TIMEOUT

    def __init__(self, message: str, deficient: Iterable = ()):
        super().__init__(message)
        self.deficient = list(deficient)


class AmbiguousTransitionError(SQLossError, ValueError):
    """Raised by deduce_move; callers skip the sample and count it."""


class EmptyLogError(SQLossError, ValueError):
    exit_code = EXIT_CONFIG

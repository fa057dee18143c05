"""
Error hierarchy shared by every stage of the pipeline, and the mapping from
errors onto command line exit codes
"""
from __future__ import annotations

from typing import Any, Dict, NamedTuple


class SpecklePadError(Exception):
    """Base class for every error raised by the toolkit"""

    exit_code = 1

    def __init__(self, message: str, **context: Any) -> None:
        self.context: Dict[str, Any] = context
        super().__init__(message)


class ConfigurationError(SpecklePadError):
    """Invalid shapes, geometries, hyperparameters or experiment settings"""

    exit_code = 1


class DataError(SpecklePadError):
    """Inputs whose content violates a precondition (labels, scores, clip lengths)"""

    exit_code = 2


class FormatError(DataError):
    """A sample or weight file whose header cannot be understood"""


class TruncatedSampleError(DataError):
    """A file ended before the payload its header announced"""


class NumericError(SpecklePadError):
    """NaN or Inf showed up somewhere it never should"""

    exit_code = 3


class TrainingError(NumericError):
    """Non-finite loss or gradient while fitting a network"""


ErrorDebugInfo = NamedTuple("ErrorDebugInfo", [("kind", str), ("exit_code", int), ("error", SpecklePadError)])


def get_debug_info(error: SpecklePadError) -> ErrorDebugInfo:
    """Classify an error for display"""
    return ErrorDebugInfo(type(error).__name__, error.exit_code, error)


def display_error(debug: ErrorDebugInfo) -> None:
    """print a helpful error message"""
    context = ", ".join(f"{key}={value}" for key, value in sorted(debug.error.context.items()))
    suffix = f" ({context})" if context else ""
    print(f"{debug.kind}: {debug.error}{suffix}")


def handle(error: SpecklePadError) -> int:
    """report the error and return the exit code the process should use"""
    debug = get_debug_info(error)
    display_error(debug)
    return debug.exit_code

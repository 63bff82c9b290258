"""
Error module for boxboost
Exception hierarchy shared by the library and the command-line interface
"""

from typing import Optional


class BoxBoostError(Exception):
    """Base class for every error raised by boxboost"""

    exit_code = 1

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def to_dict(self) -> dict:
        """Machine-readable form written to stderr by the CLI"""
        return {
            "error": type(self).__name__,
            "message": self.message,
            "exit_code": self.exit_code,
        }


class UsageError(BoxBoostError):
    """Invalid command line or API misuse"""

    exit_code = 2


class ConfigError(BoxBoostError):
    """Invalid configuration file or flag value"""

    exit_code = 3


class ParameterError(ConfigError):
    """Numeric parameter outside its allowed range"""


class DataError(BoxBoostError):
    """Problem with input data or artifacts"""

    exit_code = 4


class ShapeError(DataError):
    """Arrays or masks with incompatible shapes"""


class InvalidAnnotationError(DataError):
    """Box annotation that does not fit its image"""


class ParseError(DataError):
    """Malformed file; offset is the byte position of the problem"""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset

    def to_dict(self) -> dict:
        result = super().to_dict()
        result["offset"] = self.offset
        return result


class DataIOError(DataError):
    """Missing or unreadable file"""


class EmptyPseudoSetError(DataError):
    """Boost training requested but no pseudo label survived filtering"""


class NumericalError(BoxBoostError):
    """NaN or Inf detected during computation"""

    exit_code = 5


def require_range(name: str, value: float, low: float, high: float):
    """Raise ParameterError unless low <= value <= high"""
    if not (low <= value <= high):
        raise ParameterError(f"{name} must be in [{low}, {high}], got {value}")

"""
Exception types shared by the readout library and the command line.
"""

from typing import Optional


class ReadoutError(Exception):
    """Base class for every error raised by the readout toolkit."""


class InvalidParameterError(ReadoutError, ValueError):
    """A physical or numerical parameter is outside its allowed range."""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(message)


class ParseError(ReadoutError, ValueError):
    """A text input (histogram, trace, scheme) could not be parsed."""

    def __init__(self, message: str, source: Optional[str] = None, line_number: Optional[int] = None):
        self.source = source
        self.line_number = line_number
        location = ''
        if source is not None:
            location = f"{source}"
            if line_number is not None:
                location += f":{line_number}"
            location += ': '
        super().__init__(f"{location}{message}")


class ConfigError(ReadoutError):
    """Configuration is missing a field, has a bad value or conflicts."""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        prefix = f"config field '{field}': " if field else ''
        super().__init__(f"{prefix}{message}")


class CampaignError(ReadoutError):
    """A Monte Carlo campaign was aborted by a failing trial."""

    def __init__(self, message: str, label: Optional[str] = None, stream_id: Optional[int] = None):
        self.label = label
        self.stream_id = stream_id
        super().__init__(f"{message} (label={label}, stream_id={stream_id})")


class InsufficientDataError(ReadoutError):
    """An adaptive readout ran out of sub-bins before its cut-off time."""

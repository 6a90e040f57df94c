"""Exception hierarchy shared by every stage of the pipeline."""


class HeartsigError(Exception):
    """Base class for all package errors."""


class ParseError(HeartsigError):
    """Malformed WFDB header, signal or annotation content."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedFormat(HeartsigError):
    """Signal stored in a WFDB format other than 212."""


class FetchError(HeartsigError):
    """Record download failed."""


class EmptyInput(HeartsigError, ValueError):
    pass


class TooShort(HeartsigError, ValueError):
    """Record shorter than the detector learning phase."""


class ConfigError(HeartsigError, ValueError):
    pass


class ShapeError(HeartsigError, ValueError):
    pass


class DataError(HeartsigError, ValueError):
    pass


class FormatError(HeartsigError):
    """Bad magic, version or truncated binary container."""

"""Exception types shared across the package."""


class DrcsdError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(DrcsdError):
    """Input violates a documented precondition or invariant."""


class ParseError(DrcsdError):
    """Malformed input file; carries the offending line number."""

    def __init__(self, message, path=None, line_no=None):
        self.path = path
        self.line_no = line_no
        loc = ""
        if path is not None:
            loc = f" ({path}"
            if line_no is not None:
                loc += f", line {line_no}"
            loc += ")"
        super().__init__(message + loc)


class CapacityError(DrcsdError):
    """A resource budget (memory, rejection attempts) was exceeded."""


class SamplingError(DrcsdError):
    """Negative sampling is impossible for some user."""


class NumericError(DrcsdError):
    """A non-finite value appeared where a finite one is required."""

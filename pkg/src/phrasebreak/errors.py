"""Shared exception types.

Everything derives from ValueError so callers that do not care about the
distinction can catch one thing. The CLI maps these to exit code 2.
"""


class DataError(ValueError):
    """Input data violates a documented contract (bad times, bad labels...)."""


class ParseError(ValueError):
    """A text document could not be parsed. Carries a line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ShapeError(ValueError):
    """Array arguments have incompatible shapes or dtypes."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or out of range."""


class ContractError(ValueError):
    """An object is used in a state its provenance does not allow."""

"""Exception types shared across the package.

Parameter, shape, and length violations raise plain ``ValueError``; the
classes here exist where callers (notably the CLI) need to distinguish
failure categories by type.
"""


class BirqError(Exception):
    """Base class for package-specific errors."""


class ConfigError(BirqError, ValueError):
    """Invalid or unknown configuration key/value."""


class DataError(BirqError):
    """Input data that cannot be used (missing, empty, wrong kind)."""


class FormatError(DataError):
    """Malformed binary file: bad magic, version, shape, or truncation."""


class NumericError(BirqError, ArithmeticError):
    """Non-finite values where finite ones are required."""

"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigurationError and FormatError -> 2,
DataError -> 3, NumericError -> 4. Everything else is a plain bug.
"""


class HorizoncastError(Exception):
    """Base class for package errors."""


class ConfigurationError(HorizoncastError):
    """Invalid or inconsistent configuration."""


class FormatError(HorizoncastError):
    """On-disk artifact does not match the expected format."""


class DataError(HorizoncastError):
    """Input data is missing, too short, or otherwise unusable."""


class NumericError(HorizoncastError):
    """A computation produced non-finite values."""


class StateError(HorizoncastError):
    """Operation applied to an object in the wrong state."""

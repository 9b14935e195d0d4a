"""Exception types shared across the package.

The harness maps these onto process exit codes (see ``freqdetect.harness.cli``).
"""


class FreqDetectError(Exception):
    """Base class for all package errors."""


class ConfigError(FreqDetectError, ValueError):
    pass


class DataError(FreqDetectError, ValueError):
    pass


class ArchitectureError(FreqDetectError, ValueError):
    """Incompatible layer shapes or unknown layer names."""


class NumericError(FreqDetectError, ArithmeticError):
    """A non-finite value showed up where it must not."""

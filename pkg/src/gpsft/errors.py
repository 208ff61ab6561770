"""Exception hierarchy shared by the whole package.

The CLI maps these onto process exit codes (see cli.EXIT_CODES); library
code raises them directly.
"""


class GpsError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GpsError):
    """Tensor shapes do not line up for the requested operation."""


class ConfigError(GpsError):
    """Invalid or inconsistent configuration values."""


class InputError(GpsError):
    """Invalid runtime input (bad labels, empty dataset, ...)."""


class ContractError(GpsError):
    """A documented API precondition was violated by the caller."""


class StateError(GpsError):
    """Operation issued against an object in the wrong state."""


class NumericError(GpsError):
    """Non-finite values encountered where finite ones are required."""


class FormatError(GpsError):
    """Malformed file content (bad magic, truncation, ragged rows, ...)."""


class IntegrityError(GpsError):
    """A frozen parameter changed, or stored data fails its consistency check."""


class CompatibilityError(GpsError):
    """Artifacts built from different base models were combined."""

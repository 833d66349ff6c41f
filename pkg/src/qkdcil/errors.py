"""Exception hierarchy shared across the package.

Built-in ValueError / IndexError are used for plain argument mistakes;
the classes here mark conditions the CLI maps to distinct exit codes.
"""


class QkdError(Exception):
    """Base class for package-specific errors."""


class ConfigError(QkdError):
    """Invalid configuration: unknown keys, out-of-range settings."""


class DataError(QkdError):
    """Invalid data: label range violations, overlapping class sets."""


class FormatError(DataError):
    """Malformed binary file (bad magic, truncation, inconsistent sizes)."""


class VersionError(FormatError):
    """Recognized file family but unsupported version tag."""


class StateError(QkdError):
    """Operation requested in an invalid model state (e.g. untrained model)."""


class DegenerateTaskError(QkdError):
    """Task-vector aggregation cancelled to (numerically) zero."""


class GenerationError(DataError):
    """Synthetic stream generation could not satisfy its constraints."""

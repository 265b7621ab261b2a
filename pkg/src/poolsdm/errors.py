"""Exception taxonomy mirrored by the CLI exit codes."""


class PoolsdmError(Exception):
    """Base class for package errors."""


class ConfigError(PoolsdmError):
    """Invalid configuration (CLI exit code 2)."""


class DataError(PoolsdmError, ValueError):
    """Malformed or inconsistent input data (CLI exit code 3)."""


class NumericalError(PoolsdmError, RuntimeError):
    """Overflow, singular system, or failed fit (CLI exit code 4)."""

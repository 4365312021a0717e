"""Exception hierarchy shared across the package.

The CLI maps ``UsageError``/``ConfigError`` to exit code 2 and everything
else derived from ``FsebError`` to exit code 1.
"""


class FsebError(Exception):
    """Base class for all package errors."""


class DimensionError(FsebError, ValueError):
    pass


class ConfigError(FsebError, ValueError):
    pass


class UsageError(FsebError, ValueError):
    pass


class DataError(FsebError, ValueError):
    pass


class NumericError(FsebError, ArithmeticError):
    pass


class FormatError(FsebError, ValueError):
    pass


class CorruptionError(FsebError, ValueError):
    pass


class ServiceError(FsebError, RuntimeError):
    """A remote provider could not be reached or kept failing after retries."""


class ProtocolError(FsebError, RuntimeError):
    """A remote provider answered, but with something we cannot interpret."""


class SearchError(FsebError, RuntimeError):
    pass

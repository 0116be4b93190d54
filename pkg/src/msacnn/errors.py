"""Exception hierarchy shared by all modules.

The CLI maps ``ConfigurationError``/``DataError``/``UsageError`` to exit code 1
and ``InvariantError`` to exit code 2.
"""


class MsaCnnError(Exception):
    pass


class ConfigurationError(MsaCnnError, ValueError):
    pass


class DataError(MsaCnnError, ValueError):
    pass


class UsageError(MsaCnnError, ValueError):
    pass


class InvariantError(MsaCnnError, AssertionError):
    pass

"""Exception hierarchy shared across the package.

The CLI maps :class:`UserError` subclasses to exit status 2 and
:class:`NumericalError` to exit status 1.
"""


class BsgatError(Exception):
    """Base class for all package errors."""


class UserError(BsgatError):
    """Bad input supplied by the caller (config, files, arguments)."""


class ConfigError(UserError):
    pass


class DataError(UserError):
    """Malformed or inconsistent dataset / graph / checkpoint content."""


class NumericalError(BsgatError):
    """Non-finite values encountered during training or inference."""

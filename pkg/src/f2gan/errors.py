"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Raised for malformed shapes, dimensions or run configurations.

    ``line`` is filled in when the error can be traced to a line of a
    configuration file.
    """

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line

    def __str__(self):
        msg = super().__str__()
        if self.line is not None:
            return f"line {self.line}: {msg}"
        return msg


class UsageError(RuntimeError):
    """Raised when an API is called out of order (e.g. a stale forward cache)."""


class NumericDomainError(ValueError):
    """Raised when an input lies outside the domain of a numeric routine."""


class ProtocolError(RuntimeError):
    """Raised when the server/client message exchange is incomplete or malformed."""


class NonFiniteError(FloatingPointError):
    """Raised when training produces a NaN or infinite value."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration

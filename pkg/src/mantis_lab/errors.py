"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when input data violates a documented precondition."""


class ArgumentError(ValueError):
    """Raised when an operation is called with out-of-range arguments."""


class ConfigError(ValueError):
    """Raised for malformed or inconsistent experiment configuration."""


class NumericError(ArithmeticError):
    """Raised when a computation produces non-finite values.

    The message should carry enough location context (block index,
    sequence step, parameter name) to find the source.
    """


class InternalError(RuntimeError):
    """Raised when an internal invariant is violated; indicates a bug."""

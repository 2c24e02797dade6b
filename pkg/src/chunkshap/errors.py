"""Exception types shared across the package."""


class UsageError(ValueError):
    """Invalid configuration or input data, detectable before any heavy work.

    The CLI maps this (and request validation failures) to exit code 2.
    """


class NumericalError(RuntimeError):
    """Non-finite values encountered mid-computation; reported, never clipped."""

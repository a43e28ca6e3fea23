"""Exception hierarchy shared across the package."""


class HypermieError(Exception):
    """Base class for all package errors."""


class ValidationError(HypermieError):
    """Invalid configuration, arguments, or data (CLI exit code 1)."""


class FormatError(ValidationError):
    """Malformed serialized file. `code` identifies the failure mode."""

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


class NumericsError(HypermieError):
    """Numerical failure: non-finite values, divergence (CLI exit code 2)."""

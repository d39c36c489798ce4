"""Exception taxonomy shared across the package.

Every error raised by library code is one of these, so callers (and the CLI
exit-code mapping) can distinguish user mistakes from numerical blowups.
"""


class FactnasError(Exception):
    """Base class for all package errors."""


class ConfigError(FactnasError):
    """Invalid configuration: unknown key, bad type, out-of-range value."""


class UsageError(FactnasError):
    """API misuse: wrong call sequence, missing required argument."""


class DimensionError(FactnasError):
    """Tensor shape mismatch or an operation that would produce an empty output."""


class FormatError(FactnasError):
    """Malformed file content (checkpoint, genotype text, IDX/CIFAR bytes)."""


class ValidationError(FactnasError):
    """Input data rejected by validation (non-finite values, bad labels)."""


class NumericalError(FactnasError):
    """Non-finite values produced during computation (divergence, overflow)."""

"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: configuration and argument
problems exit 2, file/format problems exit 3, numerical faults exit 4.
"""


class LaprError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgument(LaprError, ValueError):
    """Bad shapes, bad configuration, or out-of-range arguments."""


class DegenerateVector(LaprError):
    """A zero-norm embedding reached a similarity computation."""


class DegenerateSupervision(LaprError):
    """Mined positive and negative sets overlap (constant or tied scores)."""


class StaleCache(LaprError):
    """Mode cache fingerprint does not match the current prompt bank."""


class UndefinedCorrelation(LaprError):
    """Correlation requested over constant or too-few score pairs."""


class GenerationError(LaprError):
    """Synthetic data generation could not satisfy its constraints."""


class FormatError(LaprError):
    """Malformed, truncated, or wrong-magic data file."""

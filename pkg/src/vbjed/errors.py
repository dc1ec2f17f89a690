"""Exception types raised across the package."""

import numpy as np


class NotPSDError(np.linalg.LinAlgError):
    """Matrix has an eigenvalue below the positive-semidefinite tolerance."""


class SingularMatrixError(np.linalg.LinAlgError):
    """Matrix is not positive definite enough to be inverted."""


class ConfigError(ValueError):
    """Inconsistent simulation or algorithm configuration."""


class BadAlphaError(ConfigError):
    """Exponential correlation coefficient with modulus >= 1."""


class DimensionMismatchError(ValueError):
    """Array shapes do not agree."""


class DegenerateChannelError(ValueError):
    """Channel second moment too small to form a linear symbol estimate."""


class DegenerateTruthError(ValueError):
    """Reference channel has zero Frobenius norm."""

"""
Dense complex linear algebra on Hermitian matrices, complex Gaussian
sampling and the order-zero Bessel function.

All matrix routines accept arrays with arbitrary leading batch axes, i.e.
``(..., M, M)``, and act on the trailing two dimensions.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np
from scipy import special

from .errors import NotPSDError, SingularMatrixError

#: eigenvalues below ``-PSD_REJECT * trace`` are an error, not round-off
PSD_REJECT = 1e-8
#: smallest eigenvalue must exceed ``PD_FLOOR * trace`` to invert
PD_FLOOR = 1e-12


def hermitian_part(a: np.ndarray) -> np.ndarray:
    """Return ``(A + A^H) / 2`` over the trailing two axes."""
    return 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))


def is_hermitian(a: np.ndarray, rtol: float = 1e-12) -> bool:
    a = np.asarray(a)
    scale = max(np.max(np.abs(a), initial=0.0), np.finfo(float).tiny)
    return bool(np.max(np.abs(a - np.conj(np.swapaxes(a, -1, -2))), initial=0.0) <= rtol * scale)


def _trace(a: np.ndarray) -> np.ndarray:
    return np.real(np.trace(a, axis1=-2, axis2=-1))


def psd_eigh(cov: np.ndarray, check: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a PSD matrix with round-off negatives set to zero.

    Raises
    ------
    NotPSDError
        If ``check`` and some eigenvalue is below ``-1e-8 * trace``.
    """
    w, u = np.linalg.eigh(hermitian_part(np.asarray(cov, dtype=complex)))
    if check:
        tol = PSD_REJECT * np.maximum(_trace(cov), 0.0)
        if np.any(w[..., 0] < -tol):
            raise NotPSDError(f"matrix is not PSD: smallest eigenvalue {np.min(w[..., 0]):.3e}")
    return np.maximum(w, 0.0), u


def from_eigh(w: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Rebuild ``U diag(w) U^H``."""
    return (u * w[..., None, :]) @ np.conj(np.swapaxes(u, -1, -2))


def psd_clamp(cov: np.ndarray) -> np.ndarray:
    """Project onto the PSD cone by flooring eigenvalues at zero."""
    w, u = psd_eigh(cov, check=False)
    return from_eigh(w, u)


def hermitian_sqrt(cov: np.ndarray) -> np.ndarray:
    """Hermitian square root ``L`` with ``L @ L^H == cov``.

    Uses the eigendecomposition rather than Cholesky so that singular PSD
    inputs (e.g. the zero matrix) are accepted.
    """
    w, u = psd_eigh(cov)
    return from_eigh(np.sqrt(w), u)


def hermitian_inverse(cov: np.ndarray) -> np.ndarray:
    """Inverse of a Hermitian positive definite matrix.

    Raises
    ------
    SingularMatrixError
        If the smallest eigenvalue is not above ``1e-12 * trace``.
    """
    w, u = np.linalg.eigh(hermitian_part(np.asarray(cov, dtype=complex)))
    if np.any(w[..., 0] <= PD_FLOOR * _trace(cov)):
        raise SingularMatrixError(f"matrix is not positive definite: smallest eigenvalue {np.min(w[..., 0]):.3e}")
    return from_eigh(1.0 / w, u)


def complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """i.i.d. CN(0, 1) draws (real and imaginary parts each N(0, 1/2))."""
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    z = rng.standard_normal(shape + (2,))
    return (z[..., 0] + 1j * z[..., 1]) * np.sqrt(0.5)


def sample_complex_gaussian(rng: np.random.Generator, mean, cov, size: int | None = None) -> np.ndarray:
    """Draw from CN(mean, cov) as ``mean + cov^{1/2} g`` with ``g ~ CN(0, I)``.

    With ``size`` given, returns ``size`` stacked draws of shape ``(size, M)``.
    """
    mean = np.asarray(mean, dtype=complex)
    root = hermitian_sqrt(cov)
    m = root.shape[-1]
    if mean.shape[-1] != m:
        raise ValueError(f"mean has length {mean.shape[-1]}, covariance is {m}x{m}")
    g = complex_normal(rng, m if size is None else (size, m))
    return mean + g @ root.T


def bessel_j0(z) -> np.ndarray | float:
    """Bessel function of the first kind, order zero (Cephes via scipy)."""
    out = special.j0(np.abs(np.asarray(z, dtype=float)))
    return float(out) if np.ndim(out) == 0 else out


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based (Philox) generator for the stream addressed by ``keys``.

    Streams with different keys are statistically independent, and a given
    ``(seed, *keys)`` yields the same sequence on every platform.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


class HermitianCov:
    """Hermitian PSD matrix with lazily cached factorizations."""

    def __init__(self, matrix, check: bool = True):
        matrix = np.array(matrix, dtype=complex)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {matrix.shape}")
        if check and not is_hermitian(matrix):
            raise NotPSDError("matrix is not Hermitian")
        self.matrix = hermitian_part(matrix)
        self.matrix.flags.writeable = False
        if check:
            self.eigh  # noqa: B018  validates PSD

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @cached_property
    def eigh(self) -> tuple[np.ndarray, np.ndarray]:
        return psd_eigh(self.matrix)

    @cached_property
    def sqrt(self) -> np.ndarray:
        return from_eigh(np.sqrt(self.eigh[0]), self.eigh[1])

    @cached_property
    def inv(self) -> np.ndarray:
        return hermitian_inverse(self.matrix)

    def __array__(self, dtype=None, copy=None):
        return self.matrix if dtype is None else self.matrix.astype(dtype)

    def __repr__(self) -> str:
        return f"HermitianCov(dim={self.dim})"

"""
Variational statistics and the closed-form expectations used by the CAVI
updates.

For a random matrix ``A`` with independent columns ``a_i ~ (mean, Sigma_i)``
and an independent ``x`` with mean ``<x>`` and diagonal covariance
``diag(tau)``::

    <||y - A x||^2> = ||y - <A><x>||^2 + <x>^H D <x> + Tr(Sigma_x D)
                      + Tr(Sigma_x <A>^H <A>),      D = diag(Tr Sigma_i)

and, with an additional independent random ``y`` and a Hermitian weight
``W``, the weighted form ``<(y - A x)^H W (y - A x)>`` adds ``Tr(W Sigma_y)``
and uses ``D = diag(Tr(W Sigma_i))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError


@dataclass
class GaussianStat:
    """Complex Gaussian factor: mean ``(..., M)`` and covariance ``(..., M, M)``."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=complex)
        self.cov = np.asarray(self.cov, dtype=complex)
        if self.cov.shape[-2:] != (self.mean.shape[-1],) * 2:
            raise DimensionMismatchError(f"mean {self.mean.shape} vs cov {self.cov.shape}")


@dataclass
class ScalarGaussianStat:
    """Real Gaussian factor with mean and variance (broadcastable arrays)."""

    mean: np.ndarray
    var: np.ndarray


@dataclass
class GammaStat:
    """Gamma factor in shape/rate form."""

    shape: np.ndarray
    rate: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return np.asarray(self.shape) / np.asarray(self.rate)


@dataclass
class SymbolPMF:
    """Discrete factor over constellation points; ``probs`` is ``(..., |S|)``."""

    probs: np.ndarray
    points: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.probs @ self.points

    @property
    def second_moment(self) -> np.ndarray:
        return self.probs @ np.abs(self.points) ** 2

    @property
    def var(self) -> np.ndarray:
        return np.maximum(self.second_moment - np.abs(self.mean) ** 2, 0.0)

    def decide(self) -> np.ndarray:
        return np.argmax(self.probs, axis=-1)


def second_moment(stat) -> np.ndarray:
    """``E|v|^2`` of a scalar Gaussian or a symbol pmf."""
    if isinstance(stat, ScalarGaussianStat):
        return np.asarray(stat.mean) ** 2 + np.asarray(stat.var)
    if isinstance(stat, SymbolPMF):
        return stat.second_moment
    raise TypeError(f"no second moment for {type(stat).__name__}")


def _col_traces(covs: np.ndarray) -> np.ndarray:
    return np.real(np.trace(covs, axis1=-2, axis2=-1))


def residual_sq_from_traces(y, a_means, cov_traces, x_mean, x_var) -> np.ndarray:
    """Same as :func:`expected_residual_sq`, with column covariances given by
    their traces ``(..., n)``. This is the form used inside the CAVI loops.
    """
    r = y - np.einsum("...mn,...n->...m", a_means, x_mean)
    col_energy = np.sum(np.abs(a_means) ** 2, axis=-2)
    return (
        np.sum(np.abs(r) ** 2, axis=-1)
        + np.sum((np.abs(x_mean) ** 2 + x_var) * cov_traces, axis=-1)
        + np.sum(x_var * col_energy, axis=-1)
    )


def expected_residual_sq(y, a_means, a_covs, x_mean, x_var) -> np.ndarray:
    """Expected ``||y - A x||^2`` under independent columns and symbols.

    Parameters
    ----------
    y : array (..., m)
    a_means : array (..., m, n)
        Column means of ``A``.
    a_covs : array (..., n, m, m)
        Column covariances.
    x_mean : array (..., n)
    x_var : array (..., n)
        Diagonal of the covariance of ``x``.
    """
    y, a_means, a_covs = np.asarray(y), np.asarray(a_means), np.asarray(a_covs)
    x_mean, x_var = np.asarray(x_mean), np.asarray(x_var, dtype=float)
    m, n = a_means.shape[-2:]
    if y.shape[-1] != m or a_covs.shape[-3:] != (n, m, m) or x_mean.shape[-1] != n or x_var.shape[-1] != n:
        raise DimensionMismatchError(
            f"y {y.shape}, A {a_means.shape}, covs {a_covs.shape}, x {x_mean.shape}/{x_var.shape}"
        )
    return residual_sq_from_traces(y, a_means, _col_traces(a_covs), x_mean, x_var)


def expected_residual_sq_det_x(y, a_means, a_covs, x) -> np.ndarray:
    """``||y - <A> x||^2 + sum_i |x_i|^2 Tr(Sigma_i)`` for a known ``x``."""
    x = np.asarray(x)
    return expected_residual_sq(y, a_means, a_covs, x, np.zeros(x.shape, dtype=float))


def expected_weighted_quadratic(y_stat: GaussianStat, a_stat: GaussianStat, x_stat: ScalarGaussianStat, weight) -> np.ndarray:
    """``<(y - a x)^H W (y - a x)>`` for independent ``y``, column ``a`` and scalar ``x``.

    Evaluates
    ``|<x>|^2 d + tau d + (<y> - <a><x>)^H W (<y> - <a><x>) + Tr(W Sigma_y) + tau <a>^H W <a>``
    with ``d = Tr(W Sigma_a)``.
    """
    W = np.asarray(weight)
    m = y_stat.mean.shape[-1]
    if a_stat.mean.shape[-1] != m or W.shape[-2:] != (m, m):
        raise DimensionMismatchError(f"y {y_stat.mean.shape}, a {a_stat.mean.shape}, W {W.shape}")
    xm = np.asarray(x_stat.mean)
    tau = np.asarray(x_stat.var, dtype=float)
    d = np.real(np.einsum("...ij,...ji->...", W, a_stat.cov))
    r = y_stat.mean - a_stat.mean * xm[..., None]
    quad_r = np.real(np.einsum("...i,...ij,...j->...", np.conj(r), W, r))
    quad_a = np.real(np.einsum("...i,...ij,...j->...", np.conj(a_stat.mean), W, a_stat.mean))
    tr_y = np.real(np.einsum("...ij,...ji->...", W, y_stat.cov))
    return (np.abs(xm) ** 2 + tau) * d + quad_r + tr_y + tau * quad_a

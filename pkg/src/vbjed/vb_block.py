"""
Block (whole-frame) variational-Bayes smoother.

All ``T`` received vectors are processed together. The channel transition
is written with an auxiliary precision ``nu_i = (1 - eta_i^2)^-1``::

    p(h_t | h_{t-1}, eta, nu) = CN(eta h_{t-1}, nu^-1 R)

and the mean-field factors are ``q(h_{i,t})``, ``q(eta_i)``, ``q(nu_i)``,
``q(gamma_t)`` and ``q(x_{i,t})``. One sweep updates every channel slot
(forward Gauss-Seidel over ``t``), then ``eta``, then ``nu``, then the
symbols and noise precisions of every slot.

Because ``nu R^-1`` is the only matrix in a channel update, each posterior
covariance is diagonal in the eigenbasis of ``R_i``. The engine keeps means
and covariances in that basis; the plain-matrix functions
:func:`update_channel_block`, :func:`update_eta_block` and :func:`update_nu`
state the same updates without it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelFrame, Constellation, FrameLayout
from .errors import SingularMatrixError
from .numerics import PD_FLOOR, from_eigh, hermitian_part, psd_eigh
from .vb_expectations import GammaStat, GaussianStat, ScalarGaussianStat, expected_weighted_quadratic
from .vb_online import (
    OnlineResult,
    VBConfig,
    _initial_eta,
    clamp_eta,
    eta_second_moment,
    initial_estimate,
    run_frame_online,
    update_gamma,
    update_symbol,
)


def _r_eigh(R):
    """Eigenpairs of each ``R_i``; raises on a singular matrix."""
    rho, V = psd_eigh(np.asarray(R, dtype=complex))
    tr = rho.sum(axis=-1, keepdims=True)
    if np.any(rho <= PD_FLOOR * tr):
        raise SingularMatrixError("spatial correlation matrix is singular")
    return rho, V


# ----------------------------------------------------------------------------
# single updates
# ----------------------------------------------------------------------------


def update_channel_block(
    y, h_means, x_mean, x_var, gamma_mean, h_prev, h_next, eta: ScalarGaussianStat, nu_mean, R_inv, i: int
) -> GaussianStat:
    """Gaussian update of ``h_{i,t}`` from its slot and both temporal neighbours.

    ``Sigma = (<gamma><|x_i|^2> I + (1 + <eta^2>) <nu> R^-1)^-1`` and
    ``mean = Sigma (<gamma> r <x_i>^* + <eta> <nu> R^-1 (h_next + h_prev))``.

    Parameters
    ----------
    y : array (..., M)
    h_means : array (..., K, M)
        Current channel means of slot ``t`` (user ``i``'s entry is ignored).
    x_mean, x_var : array (..., K)
    gamma_mean : array (...)
    h_prev, h_next : array (..., M)
        Means of ``h_{i,t-1}`` and ``h_{i,t+1}`` (or the boundary substitutes).
    eta : ScalarGaussianStat
        User ``i``'s correlation factor.
    nu_mean : array (...)
    R_inv : array (M, M)
    """
    x_mean, x_var = np.asarray(x_mean), np.asarray(x_var, dtype=float)
    gamma_mean = np.asarray(gamma_mean, dtype=float)
    nu_mean = np.asarray(nu_mean, dtype=float)
    R_inv = np.asarray(R_inv)
    h_means = np.asarray(h_means)
    M = R_inv.shape[-1]
    e2 = eta_second_moment(eta)
    c = gamma_mean * (np.abs(x_mean[..., i]) ** 2 + x_var[..., i])
    prec = c[..., None, None] * np.eye(M) + ((1.0 + e2) * nu_mean)[..., None, None] * R_inv
    cov = hermitian_part(np.linalg.inv(prec))
    r = y - np.einsum("...km,...k->...m", h_means, x_mean) + h_means[..., i, :] * x_mean[..., i, None]
    smooth = np.einsum("...ij,...j->...i", R_inv, np.asarray(h_next) + np.asarray(h_prev))
    rhs = (gamma_mean * np.conj(x_mean[..., i]))[..., None] * r + (np.asarray(eta.mean) * nu_mean)[..., None] * smooth
    return GaussianStat(np.einsum("...ij,...j->...i", cov, rhs), cov)


def update_eta_block(h_means, nu_mean, R_inv, prior: ScalarGaussianStat, reset_value: float = 0.95, reset_var: float = 1e-3) -> ScalarGaussianStat:
    """Correlation update from a whole trajectory of one user's channel means.

    ``h_means`` is ``(..., T+1, M)`` with slot 0 the initial estimate::

        tau  = (<nu> sum_t h_{t-1}^H R^-1 h_{t-1} + 1/tau_0)^-1
        mean = tau (Re{<nu> sum_t h_{t-1}^H R^-1 h_t} + eta_0 / tau_0)

    followed by :func:`clamp_eta`.
    """
    h = np.asarray(h_means)
    R_inv = np.asarray(R_inv)
    prev, cur = h[..., :-1, :], h[..., 1:, :]
    Rp = np.einsum("ij,...tj->...ti", R_inv, prev)
    q = np.sum(np.real(np.conj(prev) * Rp), axis=(-2, -1))
    cross = np.sum(np.real(np.conj(Rp) * cur), axis=(-2, -1))
    nu_mean = np.asarray(nu_mean, dtype=float)
    tau0 = np.asarray(prior.var, dtype=float)
    tau = 1.0 / (nu_mean * q + 1.0 / tau0)
    mean = tau * (nu_mean * cross + np.asarray(prior.mean) / tau0)
    return clamp_eta(ScalarGaussianStat(mean, tau), reset_value, reset_var)


def update_nu(h_stats: GaussianStat, eta: ScalarGaussianStat, R_inv, a0: float, b0: float, literal: bool = False) -> GammaStat:
    """Gamma update of the auxiliary precision from a channel trajectory.

    ``h_stats`` holds slots ``0..T`` (mean ``(..., T+1, M)``, covariance
    ``(..., T+1, M, M)``). The shape is ``a0 + T M`` and the rate adds, for
    each ``t``, the expected ``R^-1``-weighted energy of ``h_t - eta h_{t-1}``
    evaluated with :func:`expected_weighted_quadratic`.

    ``literal=True`` instead uses the printed form of the rate, in which the
    ``tau`` terms carry a scalar ``Tr(R^-1)`` rather than the weight matrix.
    It is kept for comparison only.
    """
    mean, cov = np.asarray(h_stats.mean), np.asarray(h_stats.cov)
    R_inv = np.asarray(R_inv)
    T = mean.shape[-2] - 1
    M = mean.shape[-1]
    batch = mean.shape[:-2]
    if T <= 0:
        return GammaStat(np.full(batch, float(a0)), np.full(batch, float(b0)))
    em = np.asarray(eta.mean, dtype=float)[..., None]
    ev = np.asarray(eta.var, dtype=float)[..., None]
    if not literal:
        terms = expected_weighted_quadratic(
            GaussianStat(mean[..., 1:, :], cov[..., 1:, :, :]),
            GaussianStat(mean[..., :-1, :], cov[..., :-1, :, :]),
            ScalarGaussianStat(np.broadcast_to(em, batch + (T,)), np.broadcast_to(ev, batch + (T,))),
            R_inv,
        )
    else:
        r = mean[..., 1:, :] - em[..., None] * mean[..., :-1, :]
        tr_w = np.real(np.trace(R_inv))
        terms = (
            np.real(np.einsum("...ti,ij,...tj->...t", np.conj(r), R_inv, r))
            + np.real(np.einsum("ij,...tji->...t", R_inv, cov[..., 1:, :, :]))
            + ev * np.sum(np.abs(mean[..., :-1, :]) ** 2, axis=-1) * tr_w
            + ev * np.real(np.trace(cov[..., :-1, :, :], axis1=-2, axis2=-1)) * tr_w
            + em**2 * np.real(np.einsum("ij,...tji->...t", R_inv, cov[..., :-1, :, :]))
        )
    return GammaStat(np.full(batch, a0 + T * M, dtype=float), b0 + terms.sum(axis=-1))


# ----------------------------------------------------------------------------
# frame engine
# ----------------------------------------------------------------------------


@dataclass
class BlockPosterior:
    """Posterior of a block run.

    Channel factors are stored in the eigenbasis ``V`` of each ``R_i``:
    ``h_{i,t} = V_i g_{i,t}`` with covariance ``V_i diag(d_{i,t}) V_i^H``.
    Slot axes exclude the fixed initial estimate.

    Attributes
    ----------
    g : array (..., T, K, M)
    d : array (..., T, K, M)
    basis : array (K, M, M)
    eta : ScalarGaussianStat, ``(..., K)``
    nu : GammaStat, ``(..., K)``
    gamma : GammaStat, ``(..., T)``
    probs : array (..., T, K, |S|)
        Symbol pmfs, zero on pilot slots.
    """

    g: np.ndarray
    d: np.ndarray
    basis: np.ndarray
    eta: ScalarGaussianStat
    nu: GammaStat
    gamma: GammaStat
    probs: np.ndarray

    @property
    def h_mean(self) -> np.ndarray:
        """Channel means ``(..., T, K, M)``."""
        return np.einsum("kij,...tkj->...tki", self.basis, self.g)

    @property
    def h_cov(self) -> np.ndarray:
        """Channel covariances ``(..., T, K, M, M)``."""
        return from_eigh(self.d, np.broadcast_to(self.basis, self.d.shape[:-1] + self.basis.shape[-2:]))

    @property
    def h_cov_trace(self) -> np.ndarray:
        return self.d.sum(axis=-1)


@dataclass
class BlockResult:
    """Block run outputs; ``H_est`` uses the frame layout ``(..., T, M, K)``."""

    H_est: np.ndarray
    decisions: np.ndarray
    posterior: BlockPosterior
    online: OnlineResult | None
    iterations: int

    @property
    def eta_mean(self) -> np.ndarray:
        return self.posterior.eta.mean

    @property
    def nu_mean(self) -> np.ndarray:
        return self.posterior.nu.mean


def _symbol_moments(probs, pts):
    xm = probs @ pts
    xv = np.maximum(probs @ np.abs(pts) ** 2 - np.abs(xm) ** 2, 0.0)
    return xm, xv


def run_block(
    frame: ChannelFrame,
    constellation: Constellation,
    config: VBConfig | None = None,
    init: GaussianStat | None = None,
    online: OnlineResult | None = None,
) -> BlockResult:
    """Block strategy over a complete frame.

    Channel means start from one pass of the online strategy (``online`` may
    be passed in to reuse an existing run). With ``config.block_warm_start``
    the symbol pmfs, noise precisions and correlation estimate are taken from
    that pass as well, with ``<nu> = (1 - <eta>^2)^-1``; otherwise they start
    from their priors with zero symbol means.

    The boundary slot ``T`` uses ``<eta><h_T>`` as its forward neighbour by
    default and ``<eta> h_0`` with ``config.block_boundary == "literal"``.
    The ``nu`` factor is recomputed from its original prior in every sweep.
    """
    config = config or VBConfig()
    mask = frame.pilot_mask
    Y = frame.Y
    T, M, K = mask.size, frame.M, frame.K
    batch = Y.shape[:-2]
    pts = constellation.points
    S = constellation.size
    known = config.known_eta is not None

    if init is None:
        lead = T if mask.all() else int(np.argmin(mask))
        init = initial_estimate(frame, FrameLayout((lead,), (T - lead,)))
    if online is None:
        online = run_frame_online(frame, constellation, config, init)

    rho, V = _r_eigh(frame.R)
    w = 1.0 / rho  # R^-1 eigenvalues, (K, M)
    Vh = np.conj(np.swapaxes(V, -1, -2))

    # slot 0: fixed initial estimate, rotated once
    g0 = np.einsum("kij,...kj->...ki", Vh, init.mean)
    d0_w = np.real(np.einsum("kij,...kjl,kli->...ki", Vh, init.cov, V))  # diag of V^H Sigma_0 V

    g = np.einsum("kij,...tjk->...tki", Vh, online.H_est)
    h = np.swapaxes(online.H_est, -1, -2).copy()  # (..., T, K, M)
    d = np.zeros(batch + (T, K, M))

    probs = np.zeros(batch + (T, K, S))
    data = np.flatnonzero(~mask)
    pil = np.flatnonzero(mask)
    xm = np.zeros(batch + (T, K), dtype=complex)
    xv = np.zeros(batch + (T, K))
    xm[..., pil, :] = frame.X[..., pil, :]
    eta_prior = _initial_eta(config, batch + (K,))
    if config.block_warm_start:
        probs[..., data, :, :] = online.probs[..., data, :, :]
        xm[..., data, :], xv[..., data, :] = _symbol_moments(online.probs[..., data, :, :], pts)
        gamma = online.gamma_mean.copy()
        eta = eta_prior if known else ScalarGaussianStat(online.eta_mean[..., -1, :].copy(), online.eta_var[..., -1, :].copy())
        nu = 1.0 / np.maximum(1.0 - eta_second_moment(ScalarGaussianStat(eta.mean, np.zeros_like(eta.mean))), 1e-12)
    else:
        probs[..., data, :, :] = constellation.priors
        xv[..., data, :] = constellation.priors @ np.abs(pts) ** 2
        gamma = np.full(batch + (T,), config.a0 / config.b0)
        eta = eta_prior
        nu = np.full(batch + (K,), config.nu_a0 / config.nu_b0)
    nu_shape = np.full(batch + (K,), config.nu_a0)
    nu_rate = np.full(batch + (K,), config.nu_b0)
    g_shape = np.full(batch + (T,), config.a0)
    g_rate = np.full(batch + (T,), config.b0)

    for _ in range(config.I_tr):
        e2 = eta_second_moment(eta, exact=known)
        # channels: forward over slots, sequential over users
        for t in range(T):
            y = Y[..., t, :]
            for i in range(K):
                prev = g[..., t - 1, i, :] if t > 0 else g0[..., i, :]
                if t < T - 1:
                    nxt = g[..., t + 1, i, :]
                elif config.block_boundary == "literal":
                    nxt = eta.mean[..., i, None] * g0[..., i, :]
                else:
                    nxt = eta.mean[..., i, None] * g[..., t, i, :]
                c = gamma[..., t] * (np.abs(xm[..., t, i]) ** 2 + xv[..., t, i])
                prec = c[..., None] + ((1.0 + e2[..., i]) * nu[..., i])[..., None] * w[i]
                r = y - np.einsum("...km,...k->...m", h[..., t, :, :], xm[..., t, :]) + h[..., t, i, :] * xm[..., t, i, None]
                rp = np.einsum("ij,...j->...i", Vh[i], r)
                gi = (
                    (gamma[..., t] * np.conj(xm[..., t, i]))[..., None] * rp
                    + (eta.mean[..., i] * nu[..., i])[..., None] * w[i] * (nxt + prev)
                ) / prec
                g[..., t, i, :] = gi
                d[..., t, i, :] = 1.0 / prec
                h[..., t, i, :] = np.einsum("ij,...j->...i", V[i], gi)
        gfull = np.concatenate([g0[..., None, :, :], g], axis=-3)  # (..., T+1, K, M)
        dfull = np.concatenate([d0_w[..., None, :, :], d], axis=-3)
        # correlation coefficients
        if not known:
            prev, cur = gfull[..., :-1, :, :], gfull[..., 1:, :, :]
            q = np.sum(w * np.abs(prev) ** 2, axis=(-3, -1))
            cross = np.sum(w * np.real(np.conj(prev) * cur), axis=(-3, -1))
            tau = 1.0 / (nu * q + 1.0 / eta_prior.var)
            mean = tau * (nu * cross + eta_prior.mean / eta_prior.var)
            eta = clamp_eta(ScalarGaussianStat(mean, tau), config.eta_reset, config.tau_eta0)
        # auxiliary precisions, from the original prior every sweep
        nu_shape, nu_rate = _nu_rate_diag(gfull, dfull, w, eta, config)
        nu = nu_shape / nu_rate
        # symbols on data slots, then every slot's noise precision
        tr = d.sum(axis=-1)
        if data.size:
            Yd, hd, trd = Y[..., data, :], h[..., data, :, :], tr[..., data, :]
            xmd, xvd = xm[..., data, :], xv[..., data, :]
            gd = gamma[..., data]
            for i in range(K):
                pmf = update_symbol(Yd, hd, trd, xmd, gd, constellation, i)
                probs[..., data, i, :] = pmf.probs
                xmd[..., i] = pmf.mean
                xvd[..., i] = pmf.var
            xm[..., data, :], xv[..., data, :] = xmd, xvd
        gs = update_gamma(Y, h, tr, xm, xv, config.a0, config.b0)
        g_shape, g_rate = gs.shape, gs.rate
        gamma = gs.mean

    decisions = np.full(batch + (T, K), -1, dtype=np.int64)
    if data.size:
        decisions[..., data, :] = np.argmax(probs[..., data, :, :], axis=-1)
    post = BlockPosterior(
        g=g,
        d=d,
        basis=V,
        eta=eta,
        nu=GammaStat(nu_shape, nu_rate),
        gamma=GammaStat(g_shape, g_rate),
        probs=probs,
    )
    H_est = np.swapaxes(post.h_mean, -1, -2)
    return BlockResult(H_est, decisions, post, online, config.I_tr)


def _nu_rate_diag(gfull, dfull, w, eta: ScalarGaussianStat, config: VBConfig):
    """:func:`update_nu` for all users with diagonal (eigenbasis) statistics."""
    T = gfull.shape[-3] - 1
    M = gfull.shape[-1]
    em = np.asarray(eta.mean)[..., None, :, None]
    ev = np.asarray(eta.var)[..., None, :, None]
    prev_g, cur_g = gfull[..., :-1, :, :], gfull[..., 1:, :, :]
    prev_d, cur_d = dfull[..., :-1, :, :], dfull[..., 1:, :, :]
    quad = w * np.abs(cur_g - em * prev_g) ** 2 + w * cur_d
    if config.nu_rate == "lemma":
        terms = quad + (em**2 + ev) * w * prev_d + ev * w * np.abs(prev_g) ** 2
    else:
        tr_w = w.sum(axis=-1)[:, None]
        terms = quad + ev * (np.abs(prev_g) ** 2 + prev_d) * tr_w + em**2 * w * prev_d
    shape = np.full(terms.shape[:-3] + (terms.shape[-2],), config.nu_a0 + T * M, dtype=float)
    return shape, config.nu_b0 + terms.sum(axis=(-3, -1))

"""
Online variational-Bayes joint channel estimation and detection.

Every slot runs a prediction step (Gauss-Markov propagation of the previous
posterior, with the correlation coefficient replaced by its second moment)
followed by coordinate-ascent sweeps over the factors

    q(h_i)  complex Gaussian      q(eta_i)  real Gaussian
    q(x_i)  pmf over S            q(gamma)  Gamma

in the order h -> eta -> x -> gamma. Symbols are fixed to the pilots on
pilot slots. The posterior of slot ``t`` becomes the prior of slot ``t+1``.

The per-update functions below (:func:`update_channel`, :func:`update_eta`,
...) work on plain matrices. :func:`run_frame_online` evaluates the same
updates in the eigenbasis of each user's predicted covariance, where the
posterior covariance is diagonal, so a CAVI sweep costs O(K M^2) per slot.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelFrame, Constellation, FrameLayout
from .errors import ConfigError, DegenerateChannelError, SingularMatrixError
from .numerics import from_eigh, hermitian_part, psd_clamp, psd_eigh
from .vb_expectations import (
    GammaStat,
    GaussianStat,
    ScalarGaussianStat,
    SymbolPMF,
    residual_sq_from_traces,
)

#: relative ridge applied to near-singular predicted covariances
RIDGE = 1e-10


@dataclass
class VBConfig:
    """Priors and iteration control shared by the online and block solvers.

    ``known_eta`` (one value per user, or a scalar) switches off the
    correlation update and uses the given coefficient exactly.
    ``exact_eta_prior`` predicts with ``eta^2`` instead of ``E[eta^2]``.
    ``tol`` enables early exit once no mean moves by more than ``tol``.
    """

    I_tr: int = 50
    eta0: float = 0.95
    tau_eta0: float = 1e-3
    a0: float = 1e-4
    b0: float = 1e-4
    nu_a0: float = 1e-4
    nu_b0: float = 1e-4
    known_eta: object = None
    exact_eta_prior: bool = False
    eta_reset: float = None
    tol: float = None
    block_boundary: str = "pseudo"
    nu_rate: str = "lemma"
    block_warm_start: bool = True

    def __post_init__(self):
        if self.I_tr < 0:
            raise ConfigError("I_tr must be >= 0")
        for name in ("tau_eta0", "a0", "b0", "nu_a0", "nu_b0"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.eta_reset is None:
            self.eta_reset = self.eta0
        if not 0 <= self.eta_reset <= 1:
            raise ConfigError("eta_reset must be in [0, 1]")
        if self.block_boundary not in ("pseudo", "literal"):
            raise ConfigError(f"unknown block_boundary {self.block_boundary!r}")
        if self.nu_rate not in ("lemma", "literal"):
            raise ConfigError(f"unknown nu_rate {self.nu_rate!r}")


# ----------------------------------------------------------------------------
# single updates
# ----------------------------------------------------------------------------


def clamp_eta(eta: ScalarGaussianStat, reset_value: float = 0.95, reset_var: float = 1e-3) -> ScalarGaussianStat:
    """Reset means outside ``[0, 1]`` to ``reset_value`` (variance to ``reset_var``)."""
    mean = np.asarray(eta.mean, dtype=float)
    var = np.asarray(eta.var, dtype=float)
    bad = (mean < 0) | (mean > 1)
    return ScalarGaussianStat(np.where(bad, reset_value, mean), np.where(bad, reset_var, var))


def eta_second_moment(eta: ScalarGaussianStat, exact: bool = False) -> np.ndarray:
    mean = np.asarray(eta.mean, dtype=float)
    return mean**2 if exact else mean**2 + np.asarray(eta.var, dtype=float)


def predict_prior(prev: GaussianStat, eta: ScalarGaussianStat, R, exact: bool = False) -> GaussianStat:
    """Predicted channel prior ``(eta * h, E[eta^2] Sigma + (1 - E[eta^2]) R)``.

    The covariance is projected onto the PSD cone (the blend weight on ``R``
    is negative when ``E[eta^2] > 1``).
    """
    e2 = eta_second_moment(eta, exact)[..., None, None]
    cov = e2 * prev.cov + (1.0 - e2) * np.asarray(R)
    mean = np.asarray(eta.mean)[..., None] * prev.mean
    return GaussianStat(mean, psd_clamp(cov))


def _regularized_inverse(cov: np.ndarray) -> np.ndarray:
    w, u = psd_eigh(cov, check=False)
    m = cov.shape[-1]
    ridge = RIDGE * np.maximum(w.sum(axis=-1, keepdims=True), 0.0) / m
    w = np.maximum(w, ridge)
    if np.any(w <= 0):
        raise SingularMatrixError("predicted covariance is zero")
    return from_eigh(1.0 / w, u)


def _interference_free(y, h_means, x_mean, i):
    """``y - sum_{j != i} <h_j> <x_j>`` with ``h_means`` shaped ``(..., K, M)``."""
    full = np.einsum("...km,...k->...m", h_means, x_mean)
    return y - full + h_means[..., i, :] * x_mean[..., i, None]


def update_channel(y, h_means, x_mean, x_var, gamma_mean, prior: GaussianStat, i: int) -> GaussianStat:
    """Gaussian update of user ``i``'s channel.

    ``Sigma = (<gamma><|x_i|^2> I + P^-1)^-1`` and
    ``mean = Sigma (<gamma> r <x_i>^* + P^-1 m)`` where ``(m, P)`` is the
    predicted prior and ``r`` the received vector with the other users'
    mean contributions removed.
    """
    x_mean, x_var = np.asarray(x_mean), np.asarray(x_var, dtype=float)
    gamma_mean = np.asarray(gamma_mean, dtype=float)
    M = prior.mean.shape[-1]
    p_inv = _regularized_inverse(prior.cov)
    c = gamma_mean * (np.abs(x_mean[..., i]) ** 2 + x_var[..., i])
    prec = c[..., None, None] * np.eye(M) + p_inv
    cov = hermitian_part(np.linalg.inv(prec))
    r = _interference_free(y, np.asarray(h_means), x_mean, i)
    rhs = (gamma_mean * np.conj(x_mean[..., i]))[..., None] * r + np.einsum("...ij,...j->...i", p_inv, prior.mean)
    return GaussianStat(np.einsum("...ij,...j->...i", cov, rhs), cov)


def update_eta(h_prev, prior_cov, h_mean, eta_prev: ScalarGaussianStat, reset_value: float = 0.95, reset_var: float = 1e-3) -> ScalarGaussianStat:
    """Gaussian update of one user's correlation coefficient.

    ``tau = (h_prev^H P^-1 h_prev + 1/tau_prev)^-1`` and
    ``mean = tau (Re{h_prev^H P^-1 <h>} + eta_prev / tau_prev)``, then
    :func:`clamp_eta`.
    """
    p_inv = _regularized_inverse(np.asarray(prior_cov))
    h_prev = np.asarray(h_prev)
    q = np.real(np.einsum("...i,...ij,...j->...", np.conj(h_prev), p_inv, h_prev))
    cross = np.real(np.einsum("...i,...ij,...j->...", np.conj(h_prev), p_inv, np.asarray(h_mean)))
    tau0 = np.asarray(eta_prev.var, dtype=float)
    tau = 1.0 / (q + 1.0 / tau0)
    mean = tau * (cross + np.asarray(eta_prev.mean) / tau0)
    return clamp_eta(ScalarGaussianStat(mean, tau), reset_value, reset_var)


def _symbol_probs(z, weight, constellation: Constellation) -> np.ndarray:
    logits = np.log(constellation.priors) - weight[..., None] * np.abs(z[..., None] - constellation.points) ** 2
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=-1, keepdims=True)


def update_symbol(y, h_means, h_cov_traces, x_mean, gamma_mean, constellation: Constellation, i: int) -> SymbolPMF:
    """Discrete update ``q(a) ~ p_a exp(-<gamma><||h_i||^2> |a - z_i|^2)``.

    ``z_i = <h_i>^H r / <||h_i||^2>`` is the linear symbol estimate from the
    interference-cancelled received vector ``r``; normalization is done in the
    log domain.
    """
    h_means = np.asarray(h_means)
    h_i = h_means[..., i, :]
    energy = np.sum(np.abs(h_i) ** 2, axis=-1) + np.asarray(h_cov_traces)[..., i]
    if np.any(energy <= 1e-30):
        raise DegenerateChannelError("channel second moment is zero")
    r = _interference_free(y, h_means, np.asarray(x_mean), i)
    z = np.einsum("...m,...m->...", np.conj(h_i), r) / energy
    probs = _symbol_probs(z, np.asarray(gamma_mean) * energy, constellation)
    return SymbolPMF(probs, constellation.points)


def update_gamma(y, h_means, h_cov_traces, x_mean, x_var, a0: float, b0: float) -> GammaStat:
    """Noise precision update: shape ``a0 + M``, rate ``b0 + <||y - H x||^2>``."""
    h_means = np.asarray(h_means)
    M = h_means.shape[-1]
    resid = residual_sq_from_traces(
        y, np.swapaxes(h_means, -1, -2), np.asarray(h_cov_traces), np.asarray(x_mean), np.asarray(x_var, dtype=float)
    )
    return GammaStat(np.broadcast_to(a0 + M, np.shape(resid)).astype(float), b0 + resid)


# ----------------------------------------------------------------------------
# slot and frame engines
# ----------------------------------------------------------------------------


@dataclass
class SlotEstimate:
    """Posterior state after one slot.

    ``h_mean``: ``(..., K, M)``, ``h_cov``: ``(..., K, M, M)``; ``decisions``
    are constellation indices (``-1`` on pilot slots).
    """

    h_mean: np.ndarray
    h_cov: np.ndarray
    eta: ScalarGaussianStat
    gamma: GammaStat
    symbols: SymbolPMF
    decisions: np.ndarray
    iterations_run: int


@dataclass
class OnlineResult:
    """Per-slot outputs of a frame run, stacked along the slot axis.

    ``H_est`` uses the frame layout ``(..., T, M, K)``.
    """

    H_est: np.ndarray
    h_cov_trace: np.ndarray
    eta_mean: np.ndarray
    eta_var: np.ndarray
    gamma_shape: np.ndarray
    gamma_rate: np.ndarray
    probs: np.ndarray
    decisions: np.ndarray
    pilot_mask: np.ndarray
    iterations: np.ndarray
    final: SlotEstimate = field(repr=False)

    @property
    def gamma_mean(self) -> np.ndarray:
        return self.gamma_shape / self.gamma_rate


def _initial_eta(config: VBConfig, shape) -> ScalarGaussianStat:
    if config.known_eta is not None:
        mean = np.broadcast_to(np.asarray(config.known_eta, dtype=float), shape).copy()
        return ScalarGaussianStat(mean, np.zeros(shape))
    return ScalarGaussianStat(np.full(shape, config.eta0), np.full(shape, config.tau_eta0))


def run_slot(
    y,
    prev: GaussianStat,
    eta_prev: ScalarGaussianStat,
    R,
    constellation: Constellation,
    config: VBConfig,
    pilot=None,
) -> SlotEstimate:
    """Prediction plus ``config.I_tr`` CAVI sweeps for one slot.

    Parameters
    ----------
    y : array (..., M)
    prev : GaussianStat
        Previous posterior, mean ``(..., K, M)`` and cov ``(..., K, M, M)``.
    eta_prev : ScalarGaussianStat
        Previous correlation posterior, ``(..., K)``.
    R : array (K, M, M)
    pilot : array (..., K) or None
        Known symbols for a pilot slot; ``None`` for a data slot.
    """
    y = np.asarray(y, dtype=complex)
    K, M = prev.mean.shape[-2:]
    known = config.known_eta is not None
    pts = constellation.points
    batch = y.shape[:-1]

    # Phase I: prediction in the eigenbasis of each predicted covariance
    e2 = eta_second_moment(eta_prev, exact=known or config.exact_eta_prior)[..., None, None]
    P = e2 * prev.cov + (1.0 - e2) * np.asarray(R)
    lam, U = psd_eigh(P, check=False)
    lam = np.maximum(lam, RIDGE * np.maximum(lam.sum(-1, keepdims=True), 0.0) / M)
    if np.any(lam <= 0):
        raise SingularMatrixError("predicted covariance is zero")
    Uh = np.conj(np.swapaxes(U, -1, -2))
    hp = np.einsum("...kij,...kj->...ki", Uh, prev.mean)

    eta_mean = np.array(np.broadcast_to(eta_prev.mean, batch + (K,)), dtype=float)
    eta_var = np.array(np.broadcast_to(eta_prev.var, batch + (K,)), dtype=float)
    tau_prev = eta_var.copy()
    eta_mean_prev = eta_mean.copy()

    m = eta_mean[..., None] * hp
    d = lam.copy()
    h = np.einsum("...kij,...kj->...ki", U, m)

    if pilot is not None:
        xm = np.array(np.broadcast_to(pilot, batch + (K,)), dtype=complex)
        xv = np.zeros(batch + (K,))
        probs = np.zeros(batch + (K, constellation.size))
    else:
        probs = np.broadcast_to(constellation.priors, batch + (K, constellation.size)).copy()
        xm = probs @ pts
        xv = probs @ np.abs(pts) ** 2 - np.abs(xm) ** 2
    g_shape = np.full(batch, config.a0 + M) if config.I_tr > 0 else np.full(batch, config.a0)
    g_rate = np.full(batch, config.b0)
    gamma = np.full(batch, config.a0 / config.b0)

    hp_w = hp / lam
    q_eta = np.sum(np.real(np.conj(hp) * hp_w), axis=-1)

    it = 0
    for it in range(1, config.I_tr + 1):
        h_old = h.copy()
        # channels, sequentially over users
        for i in range(K):
            c = gamma * (np.abs(xm[..., i]) ** 2 + xv[..., i])
            r = y - np.einsum("...km,...k->...m", h, xm) + h[..., i, :] * xm[..., i, None]
            rp = np.einsum("...ij,...j->...i", Uh[..., i, :, :], r)
            denom = 1.0 + c[..., None] * lam[..., i, :]
            d[..., i, :] = lam[..., i, :] / denom
            m[..., i, :] = (
                lam[..., i, :] * (gamma * np.conj(xm[..., i]))[..., None] * rp + eta_mean[..., i, None] * hp[..., i, :]
            ) / denom
            h[..., i, :] = np.einsum("...ij,...j->...i", U[..., i, :, :], m[..., i, :])
        # correlation coefficients
        if not known:
            tau = 1.0 / (q_eta + 1.0 / tau_prev)
            cross = np.sum(np.real(np.conj(hp_w) * m), axis=-1)
            eta_mean = tau * (cross + eta_mean_prev / tau_prev)
            eta_var = tau
            bad = (eta_mean < 0) | (eta_mean > 1)
            if np.any(bad):
                eta_mean = np.where(bad, config.eta_reset, eta_mean)
                eta_var = np.where(bad, config.tau_eta0, eta_var)
        # symbols, sequentially over users
        tr = d.sum(axis=-1)
        if pilot is None:
            for i in range(K):
                energy = np.sum(np.abs(h[..., i, :]) ** 2, axis=-1) + tr[..., i]
                if np.any(energy <= 1e-30):
                    raise DegenerateChannelError("channel second moment is zero")
                r = y - np.einsum("...km,...k->...m", h, xm) + h[..., i, :] * xm[..., i, None]
                z = np.einsum("...m,...m->...", np.conj(h[..., i, :]), r) / energy
                p = _symbol_probs(z, gamma * energy, constellation)
                probs[..., i, :] = p
                xm[..., i] = p @ pts
                xv[..., i] = np.maximum(p @ np.abs(pts) ** 2 - np.abs(xm[..., i]) ** 2, 0.0)
        # noise precision
        g_rate = config.b0 + residual_sq_from_traces(y, np.swapaxes(h, -1, -2), tr, xm, xv)
        gamma = g_shape / g_rate
        if config.tol is not None and np.max(np.abs(h - h_old), initial=0.0) < config.tol:
            break

    cov = from_eigh(d, U)
    if pilot is None:
        decisions = np.argmax(probs, axis=-1)
    else:
        decisions = np.full(batch + (K,), -1, dtype=np.int64)
    return SlotEstimate(
        h_mean=h,
        h_cov=cov,
        eta=ScalarGaussianStat(eta_mean, eta_var),
        gamma=GammaStat(g_shape, g_rate),
        symbols=SymbolPMF(probs, pts),
        decisions=decisions,
        iterations_run=it,
    )


def _run_online(Y, X_pilot, pilot_mask, R, init: GaussianStat, constellation, config: VBConfig) -> OnlineResult:
    Y = np.asarray(Y)
    T = pilot_mask.size
    K, M = init.mean.shape[-2:]
    batch = Y.shape[:-2]
    S = constellation.size

    H_est = np.empty(batch + (T, M, K), dtype=complex)
    trc = np.empty(batch + (T, K))
    eta_m = np.empty(batch + (T, K))
    eta_v = np.empty(batch + (T, K))
    g_shape = np.empty(batch + (T,))
    g_rate = np.empty(batch + (T,))
    probs = np.zeros(batch + (T, K, S))
    decisions = np.full(batch + (T, K), -1, dtype=np.int64)
    iters = np.zeros(T, dtype=np.int64)

    post = init
    eta = _initial_eta(config, batch + (K,))
    est = None
    for t in range(T):
        pilot = X_pilot[..., t, :] if pilot_mask[t] else None
        est = run_slot(Y[..., t, :], post, eta, R, constellation, config, pilot=pilot)
        post = GaussianStat(est.h_mean, est.h_cov)
        eta = est.eta if config.known_eta is None else eta
        H_est[..., t, :, :] = np.swapaxes(est.h_mean, -1, -2)
        trc[..., t, :] = np.real(np.trace(est.h_cov, axis1=-2, axis2=-1))
        eta_m[..., t, :] = est.eta.mean
        eta_v[..., t, :] = est.eta.var
        g_shape[..., t] = est.gamma.shape
        g_rate[..., t] = est.gamma.rate
        if not pilot_mask[t]:
            probs[..., t, :, :] = est.symbols.probs
            decisions[..., t, :] = est.decisions
        iters[t] = est.iterations_run
    return OnlineResult(H_est, trc, eta_m, eta_v, g_shape, g_rate, probs, decisions, pilot_mask, iters, est)


def initial_estimate(frame: ChannelFrame, layout: FrameLayout, n0: float | None = None) -> GaussianStat:
    """LMMSE channel estimate from the first section's pilots."""
    from .baselines import lmmse_pilot_estimate

    p0 = layout.pilot_lengths[0]
    first = np.flatnonzero(frame.pilot_mask)[:p0]
    Yp = np.swapaxes(frame.Y[..., first, :], -1, -2)
    Xp = np.swapaxes(frame.X[..., first, :], -1, -2)
    return lmmse_pilot_estimate(Yp, Xp, frame.R, frame.n0 if n0 is None else n0)


def run_frame_interleaved(
    frame: ChannelFrame,
    layout: FrameLayout,
    constellation: Constellation,
    config: VBConfig | None = None,
    init: GaussianStat | None = None,
) -> OnlineResult:
    """Online strategy over ``L`` pilot+data sections.

    Channel and correlation posteriors carry across section boundaries; each
    section's pilot slots re-anchor the estimate. The initial state is the
    LMMSE estimate from the first section's pilots unless ``init`` is given.
    """
    config = config or VBConfig()
    if not np.array_equal(layout.pilot_mask, frame.pilot_mask):
        raise ConfigError("frame pilot pattern does not match the section layout")
    if init is None:
        init = initial_estimate(frame, layout)
    return _run_online(frame.Y, frame.X, frame.pilot_mask, frame.R, init, constellation, config)


def run_frame_online(
    frame: ChannelFrame,
    constellation: Constellation,
    config: VBConfig | None = None,
    init: GaussianStat | None = None,
) -> OnlineResult:
    """Online strategy on a frame whose pilots all precede the data."""
    mask = frame.pilot_mask
    T_p = int(mask.sum())
    if not np.all(mask[:T_p]) or np.any(mask[T_p:]):
        raise ConfigError("run_frame_online expects a single pilot block at the start")
    layout = FrameLayout((T_p,), (mask.size - T_p,))
    return run_frame_interleaved(frame, layout, constellation, config, init)

"""
Reference receivers: pilot LMMSE estimation, a decision-directed Kalman
tracker and a perfect-CSI (genie) detector.

The LMMSE estimate also serves as the initial channel state of both
variational solvers.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .channel import ChannelFrame, Constellation
from .errors import ConfigError
from .numerics import hermitian_part
from .vb_expectations import GaussianStat

#: joint enumeration is used while |S|^K stays below this
ENUM_LIMIT = 4096


def lmmse_pilot_estimate(Y_pilot, pilots, R, n0: float) -> GaussianStat:
    """Per-user LMMSE channel estimate assuming a static channel over the pilots.

    With orthogonal pilots ``P P^H = diag(||p_i||^2)`` the least-squares
    estimate ``h_ls = Y p_i^H / ||p_i||^2`` carries noise ``N0 / ||p_i||^2``
    per antenna, and

        h_i = R_i (R_i + s_i I)^-1 h_ls,   C_i = R_i - R_i (R_i + s_i I)^-1 R_i

    Parameters
    ----------
    Y_pilot : array (..., M, T_p)
    pilots : array (..., K, T_p)
    R : array (K, M, M)
    n0 : float
        Noise variance used by the estimator (must be positive).

    Returns
    -------
    GaussianStat
        Mean ``(..., K, M)`` and covariance ``(..., K, M, M)``.
    """
    if not n0 > 0:
        raise ConfigError("LMMSE needs a positive noise variance")
    Y_pilot = np.asarray(Y_pilot, dtype=complex)
    pilots = np.asarray(pilots, dtype=complex)
    R = np.asarray(R, dtype=complex)
    gram = pilots @ np.conj(np.swapaxes(pilots, -1, -2))
    power = np.real(np.diagonal(gram, axis1=-2, axis2=-1))
    off = gram - power[..., None] * np.eye(gram.shape[-1])
    if np.max(np.abs(off), initial=0.0) > 1e-9 * np.max(power):
        raise ConfigError("pilot sequences are not orthogonal")
    h_ls = np.einsum("...mt,...kt->...km", Y_pilot, np.conj(pilots)) / power[..., None]
    M = R.shape[-1]
    s = n0 / power
    A = R + s[..., None, None] * np.eye(M)
    # R A^-1 == (A^-1 R)^H because both are Hermitian
    gain = np.conj(np.swapaxes(np.linalg.solve(A, R), -1, -2))
    mean = np.einsum("...ij,...j->...i", gain, h_ls)
    cov = hermitian_part(R - gain @ R)
    return GaussianStat(mean, cov)


def _mmse_equalize(H, y, n0):
    """Linear MMSE estimate ``(H^H H + N0 I)^-1 H^H y``; ``H`` is ``(..., M, K)``."""
    Hh = np.conj(np.swapaxes(H, -1, -2))
    K = H.shape[-1]
    G = Hh @ H + n0 * np.eye(K)
    return np.linalg.solve(G, np.einsum("...km,...m->...k", Hh, y)[..., None])[..., 0]


@dataclass
class BaselineResult:
    """Channel estimates ``(..., T, M, K)`` and decisions ``(..., T, K)``."""

    H_est: np.ndarray
    decisions: np.ndarray


def lmmse_baseline(frame: ChannelFrame, constellation: Constellation, n0: float | None = None) -> BaselineResult:
    """Estimate once from the pilot block and hold it for the whole frame."""
    n0 = frame.n0 if n0 is None else n0
    mask = frame.pilot_mask
    Y = frame.Y
    Yp = np.swapaxes(Y[..., mask, :], -1, -2)
    est = lmmse_pilot_estimate(Yp, frame.pilots, frame.R, n0)
    H_hat = np.swapaxes(est.mean, -1, -2)
    T = mask.size
    H_est = np.broadcast_to(H_hat[..., None, :, :], H_hat.shape[:-2] + (T,) + H_hat.shape[-2:]).copy()
    decisions = np.full(frame.X.shape, -1, dtype=np.int64)
    xs = _mmse_equalize(H_hat[..., None, :, :], Y[..., ~mask, :], n0)
    decisions[..., ~mask, :] = constellation.nearest(xs)
    return BaselineResult(H_est, decisions)


def kf_track(frame: ChannelFrame, eta, constellation: Constellation, n0: float | None = None) -> BaselineResult:
    """Decision-directed Kalman filter on the stacked channel ``[h_1; ...; h_K]``.

    The state follows the Gauss-Markov recursion with known ``eta`` and
    ``R``. Pilot slots update with the known symbols. On data slots the
    symbols are first detected by MMSE equalization on the predicted channel
    and the hard decisions are then used as if they were pilots. One forward
    pass, starting from the stationary prior.
    """
    n0 = frame.n0 if n0 is None else n0
    Y = frame.Y
    mask = frame.pilot_mask
    T, M, K = mask.size, frame.M, frame.K
    R = np.asarray(frame.R)
    eta = np.broadcast_to(np.asarray(eta, dtype=float), (K,))
    batch = Y.shape[:-2]
    KM = K * M

    f = np.repeat(eta, M)
    Q = np.zeros((KM, KM), dtype=complex)
    P = np.zeros((KM, KM), dtype=complex)
    for k in range(K):
        blk = slice(k * M, (k + 1) * M)
        Q[blk, blk] = (1.0 - eta[k] ** 2) * R[k]
        P[blk, blk] = R[k]
    # P holds the stationary covariance, which is also the first prediction
    s = np.zeros(batch + (KM,), dtype=complex)
    P = np.broadcast_to(P, batch + (KM, KM)).copy()
    eye_m = np.eye(M)

    H_est = np.empty(batch + (T, M, K), dtype=complex)
    decisions = np.full(batch + (T, K), -1, dtype=np.int64)
    for t in range(T):
        if t > 0:
            s = f * s
            P = f[:, None] * P * f[None, :] + Q
        y = Y[..., t, :]
        if mask[t]:
            x = np.broadcast_to(frame.X[..., t, :], batch + (K,))
        else:
            H_pred = s.reshape(batch + (K, M)).swapaxes(-1, -2)
            idx = constellation.nearest(_mmse_equalize(H_pred, y, n0))
            decisions[..., t, :] = idx
            x = constellation.points[idx]
        C = np.einsum("...k,mn->...mkn", x, eye_m).reshape(batch + (M, KM))
        Ch = np.conj(np.swapaxes(C, -1, -2))
        PCh = P @ Ch
        S = C @ PCh + n0 * eye_m
        G = np.conj(np.swapaxes(np.linalg.solve(S, np.conj(np.swapaxes(PCh, -1, -2))), -1, -2))
        innov = y - np.einsum("...mn,...n->...m", C, s)
        s = s + np.einsum("...nm,...m->...n", G, innov)
        P = hermitian_part(P - G @ np.conj(np.swapaxes(PCh, -1, -2)))
        H_est[..., t, :, :] = s.reshape(batch + (K, M)).swapaxes(-1, -2)
    return BaselineResult(H_est, decisions)


def genie_detect(frame: ChannelFrame, constellation: Constellation, n0: float | None = None) -> np.ndarray:
    """Detection with the true channel.

    Exact joint ML (= MAP under uniform priors) over ``S^K`` when that set
    has at most 4096 elements, per-user MMSE equalization otherwise.
    Returns indices ``(..., T, K)`` with ``-1`` on pilot slots.
    """
    n0 = frame.n0 if n0 is None else n0
    Y, H, mask = frame.Y, frame.H, frame.pilot_mask
    K, S = frame.K, constellation.size
    decisions = np.full(frame.X.shape, -1, dtype=np.int64)
    data = np.flatnonzero(~mask)
    if S**K > ENUM_LIMIT:
        xs = _mmse_equalize(H[..., data, :, :], Y[..., data, :], n0)
        decisions[..., data, :] = constellation.nearest(xs)
        return decisions
    cand_idx = np.array(list(itertools.product(range(S), repeat=K)))
    prior_pen = -np.log(constellation.priors)[cand_idx].sum(axis=1)
    cand = constellation.points[cand_idx]
    for t in data:
        y = Y[..., t, :]
        Hs = np.einsum("...mk,nk->...nm", H[..., t, :, :], cand)
        metric = np.sum(np.abs(y[..., None, :] - Hs) ** 2, axis=-1) + n0 * prior_pen
        decisions[..., t, :] = cand_idx[np.argmin(metric, axis=-1)]
    return decisions

"""
Time-varying massive MIMO uplink channel.

Each user's channel column follows a first-order Gauss-Markov recursion

    h_t = eta * h_{t-1} + sqrt(1 - eta^2) R^{1/2} g_t,    g_t ~ CN(0, I_M)

started from the stationary draw ``h_0 = R^{1/2} g_0``, and the base station
observes ``y_t = H_t x_t + n_t`` with ``n_t ~ CN(0, N0 I_M)``.

Array layout used throughout the package (leading batch axes allowed):

* ``H``: ``(T, M, K)``, one channel matrix per slot
* ``X``: ``(T, K)``, transmitted symbols
* ``Y``: ``(T, M)``, received vectors
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BadAlphaError, ConfigError
from .numerics import HermitianCov, bessel_j0, complex_normal


# ----------------------------------------------------------------------------
# constellations
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Constellation:
    """Finite symbol alphabet with a prior pmf, normalized to unit energy."""

    points: np.ndarray
    priors: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        points = np.asarray(self.points, dtype=complex)
        priors = np.asarray(self.priors, dtype=float)
        if points.ndim != 1 or points.shape != priors.shape:
            raise ConfigError("points and priors must be 1-D arrays of equal length")
        if np.any(priors < 0) or abs(priors.sum() - 1.0) > 1e-12:
            raise ConfigError("priors must be a pmf")
        if abs(np.sum(priors * np.abs(points) ** 2) - 1.0) > 1e-12:
            raise ConfigError("constellation must have unit average energy")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "priors", priors)

    @property
    def size(self) -> int:
        return self.points.size

    def nearest(self, z) -> np.ndarray:
        """Index of the closest point to each entry of ``z``."""
        z = np.asarray(z)
        return np.argmin(np.abs(z[..., None] - self.points), axis=-1)

    @classmethod
    def from_name(cls, name: str) -> "Constellation":
        key = name.strip().upper()
        if key == "BPSK":
            pts = np.array([1.0, -1.0], dtype=complex)
        elif key == "QPSK":
            pts = np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j]) / np.sqrt(2)
        elif key in ("16QAM", "QAM16"):
            levels = np.array([-3.0, -1.0, 1.0, 3.0])
            pts = (levels[:, None] + 1j * levels[None, :]).ravel() / np.sqrt(10)
        else:
            raise ConfigError(f"unknown constellation {name!r}")
        return cls(pts, np.full(pts.size, 1.0 / pts.size), name=key)


# ----------------------------------------------------------------------------
# spatial / temporal correlation
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class CorrelationSpec:
    """Spatial correlation at the base station, diagonal fixed to ``1/M``."""

    kind: str
    M: int
    alpha: complex = 0.0


def make_correlation(spec: CorrelationSpec) -> HermitianCov:
    """Build ``R`` for ``identity-scaled`` or ``exponential`` correlation.

    For the exponential model ``[R]_{kl} = alpha^{k-l} / M`` when ``k >= l``
    and its conjugate reflection otherwise.
    """
    M = int(spec.M)
    if M < 1:
        raise ConfigError("M must be positive")
    if spec.kind == "identity-scaled":
        return HermitianCov(np.eye(M) / M)
    if spec.kind != "exponential":
        raise ConfigError(f"unknown correlation kind {spec.kind!r}")
    alpha = complex(spec.alpha)
    if abs(alpha) >= 1:
        raise BadAlphaError(f"|alpha| must be < 1, got {abs(alpha)}")
    lag = np.arange(M)[:, None] - np.arange(M)[None, :]
    # 0**0 == 1 keeps the diagonal exact for alpha == 0
    lower = alpha ** np.abs(lag)
    R = np.where(lag >= 0, lower, np.conj(lower)) / M
    return HermitianCov(R)


def eta_from_doppler(fd: float, Ts: float) -> float:
    """Slot-to-slot correlation ``J0(2 pi fd Ts)`` clamped to ``[0, 1]``."""
    if fd < 0 or Ts <= 0:
        raise ConfigError("need fd >= 0 and Ts > 0")
    return float(np.clip(bessel_j0(2 * np.pi * fd * Ts), 0.0, 1.0))


@dataclass
class GaussMarkovParams:
    """Per-user Gauss-Markov parameters.

    ``eta_mode`` is ``"fixed"`` or ``"slowly-varying"``; in the latter case
    each user's correlation is redrawn from ``N(eta, eta_var)`` (clamped to
    ``[0, 1]``) every slot, or once per frame when ``redraw == "frame"``.
    """

    eta: np.ndarray
    R: list
    eta_mode: str = "fixed"
    eta_var: float = 0.0
    redraw: str = "slot"

    def __post_init__(self):
        self.eta = np.atleast_1d(np.asarray(self.eta, dtype=float))
        if isinstance(self.R, HermitianCov) or np.ndim(self.R) == 2:
            R = self.R if isinstance(self.R, HermitianCov) else HermitianCov(self.R)
            self.R = [R] * self.eta.size
        self.R = [r if isinstance(r, HermitianCov) else HermitianCov(r) for r in self.R]
        if len(self.R) != self.eta.size:
            raise ConfigError("need one covariance per user")
        if np.any((self.eta < 0) | (self.eta > 1)):
            raise ConfigError("eta must lie in [0, 1]")
        if self.eta_mode not in ("fixed", "slowly-varying"):
            raise ConfigError(f"unknown eta_mode {self.eta_mode!r}")
        if self.redraw not in ("slot", "frame"):
            raise ConfigError(f"unknown redraw {self.redraw!r}")

    @property
    def K(self) -> int:
        return self.eta.size

    @property
    def M(self) -> int:
        return self.R[0].dim

    def R_stack(self) -> np.ndarray:
        return np.stack([r.matrix for r in self.R])

    def draw_etas(self, rng: np.random.Generator, T: int) -> np.ndarray:
        """Per-slot correlation coefficients, shape ``(T, K)``."""
        if self.eta_mode == "fixed":
            return np.broadcast_to(self.eta, (T, self.K)).copy()
        sd = np.sqrt(self.eta_var)
        if self.redraw == "frame":
            draw = np.broadcast_to(self.eta + sd * rng.standard_normal(self.K), (T, self.K))
        else:
            draw = self.eta + sd * rng.standard_normal((T, self.K))
        return np.clip(draw, 0.0, 1.0)


def evolve_channel(rng: np.random.Generator, prev, params: GaussMarkovParams, eta=None) -> np.ndarray:
    """One Gauss-Markov step for all users; ``prev=None`` draws ``h_0``.

    ``eta`` overrides ``params.eta`` (used for per-slot redraws).
    """
    M, K = params.M, params.K
    g = complex_normal(rng, (K, M))
    innov = np.stack([params.R[i].sqrt @ g[i] for i in range(K)], axis=1)
    if prev is None:
        return innov
    prev = np.asarray(prev)
    if prev.shape != (M, K):
        raise ConfigError(f"previous channel has shape {prev.shape}, expected {(M, K)}")
    eta = params.eta if eta is None else np.asarray(eta, dtype=float)
    out = eta * prev + np.sqrt(1.0 - eta**2) * innov
    # keep eta == 1 bit-exact
    return np.where(eta == 1.0, prev, out)


def noise_variance_from_snr(snr_db: float, M: int, K: int) -> float:
    """``N0 = K / (M * SNR)`` for unit-power users and ``tr(R_i) = 1``."""
    if M < 1 or K < 1:
        raise ConfigError("M and K must be positive")
    return K / (M * 10.0 ** (snr_db / 10.0))


# ----------------------------------------------------------------------------
# pilots and frame layout
# ----------------------------------------------------------------------------


def split_evenly(total: int, parts: int) -> list[int]:
    """Split ``total`` into ``parts`` near-equal sizes, larger ones first."""
    if parts < 1:
        raise ConfigError("need at least one section")
    base, extra = divmod(int(total), parts)
    return [base + (k < extra) for k in range(parts)]


def dft_pilots(K: int, Tp: int) -> np.ndarray:
    """First ``K`` rows of a ``Tp``-point DFT with unit-modulus entries.

    Rows are mutually orthogonal, ``P @ P^H = Tp * I_K``.
    """
    if Tp < K:
        raise ConfigError(f"orthogonal pilots need T_p >= K (T_p={Tp}, K={K})")
    k = np.arange(K)[:, None]
    n = np.arange(Tp)[None, :]
    return np.exp(-2j * np.pi * k * n / Tp)


@dataclass(frozen=True)
class FrameLayout:
    """Pilot/data slot pattern made of ``L`` consecutive pilot+data sections."""

    pilot_lengths: tuple
    data_lengths: tuple

    def __post_init__(self):
        if len(self.pilot_lengths) != len(self.data_lengths) or not self.pilot_lengths:
            raise ConfigError("need matching, non-empty section lists")

    @classmethod
    def interleaved(cls, T_p: int, T_d: int, L: int = 1) -> "FrameLayout":
        return cls(tuple(split_evenly(T_p, L)), tuple(split_evenly(T_d, L)))

    @property
    def L(self) -> int:
        return len(self.pilot_lengths)

    @property
    def T_p(self) -> int:
        return sum(self.pilot_lengths)

    @property
    def T_d(self) -> int:
        return sum(self.data_lengths)

    @property
    def T(self) -> int:
        return self.T_p + self.T_d

    @property
    def pilot_mask(self) -> np.ndarray:
        mask = []
        for p, d in zip(self.pilot_lengths, self.data_lengths):
            mask += [True] * p + [False] * d
        return np.array(mask, dtype=bool)

    @property
    def section_starts(self) -> list[int]:
        starts, t = [], 0
        for p, d in zip(self.pilot_lengths, self.data_lengths):
            starts.append(t)
            t += p + d
        return starts

    def pilot_matrix(self, K: int) -> np.ndarray:
        """``(K, T_p)`` pilots, each section an orthogonal DFT block."""
        return np.concatenate([dft_pilots(K, p) for p in self.pilot_lengths], axis=1)


# ----------------------------------------------------------------------------
# frames
# ----------------------------------------------------------------------------


@dataclass
class ChannelFrame:
    """One trial (or a stack of trials along leading axes).

    ``noise`` holds the unit-variance noise draw so the frame can be
    re-targeted to another SNR with identical channels and symbols.
    """

    H: np.ndarray
    X: np.ndarray
    x_index: np.ndarray
    noise: np.ndarray
    n0: float
    pilot_mask: np.ndarray
    eta: np.ndarray
    R: np.ndarray
    H0: np.ndarray = field(default=None, repr=False)

    @property
    def Y(self) -> np.ndarray:
        return np.einsum("...tmk,...tk->...tm", self.H, self.X) + np.sqrt(self.n0) * self.noise

    @property
    def T(self) -> int:
        return self.pilot_mask.size

    @property
    def M(self) -> int:
        return self.H.shape[-2]

    @property
    def K(self) -> int:
        return self.H.shape[-1]

    @property
    def pilots(self) -> np.ndarray:
        """Pilot symbols, shape ``(..., K, T_p)``."""
        return np.swapaxes(self.X[..., self.pilot_mask, :], -1, -2)

    def with_noise_variance(self, n0: float) -> "ChannelFrame":
        return replace(self, n0=float(n0))

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.H, self.X, self.noise, self.pilot_mask, np.float64(self.n0)):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def generate_frame(
    rng: np.random.Generator,
    params: GaussMarkovParams,
    constellation: Constellation,
    layout: FrameLayout,
    n0: float,
) -> ChannelFrame:
    """Draw channel trajectory, symbols and noise for one trial.

    Draw order is fixed (etas, channels, data symbols, noise) so a given
    generator state always yields the same frame.
    """
    M, K, T = params.M, params.K, layout.T
    mask = layout.pilot_mask
    etas = params.draw_etas(rng, T)

    h = evolve_channel(rng, None, params)
    H0 = h
    H = np.empty((T, M, K), dtype=complex)
    for t in range(T):
        h = evolve_channel(rng, h, params, eta=etas[t])
        H[t] = h

    x_index = np.full((T, K), -1, dtype=np.int64)
    n_data = int((~mask).sum())
    x_index[~mask] = rng.choice(constellation.size, size=(n_data, K), p=constellation.priors)
    X = np.empty((T, K), dtype=complex)
    X[~mask] = constellation.points[x_index[~mask]]
    X[mask] = layout.pilot_matrix(K).T

    noise = complex_normal(rng, (T, M))
    return ChannelFrame(
        H=H, X=X, x_index=x_index, noise=noise, n0=float(n0), pilot_mask=mask,
        eta=etas, R=params.R_stack(), H0=H0,
    )


def stack_frames(frames: list[ChannelFrame]) -> ChannelFrame:
    """Stack trials along a new leading axis; layouts and N0 must agree."""
    first = frames[0]
    for f in frames[1:]:
        if f.n0 != first.n0 or not np.array_equal(f.pilot_mask, first.pilot_mask):
            raise ConfigError("frames differ in noise level or pilot layout")
    return ChannelFrame(
        H=np.stack([f.H for f in frames]),
        X=np.stack([f.X for f in frames]),
        x_index=np.stack([f.x_index for f in frames]),
        noise=np.stack([f.noise for f in frames]),
        n0=first.n0,
        pilot_mask=first.pilot_mask,
        eta=np.stack([f.eta for f in frames]),
        R=first.R,
        H0=np.stack([f.H0 for f in frames]),
    )

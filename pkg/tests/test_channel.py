"""Tests for the channel model, pilots and frame generation."""

import mpmath
import numpy as np
import pytest

from vbjed.channel import (
    Constellation,
    CorrelationSpec,
    FrameLayout,
    GaussMarkovParams,
    dft_pilots,
    eta_from_doppler,
    evolve_channel,
    generate_frame,
    make_correlation,
    noise_variance_from_snr,
    split_evenly,
    stack_frames,
)
from vbjed.errors import BadAlphaError, ConfigError
from vbjed.numerics import rng_stream


# ============================================================================
# CONSTELLATIONS
# ============================================================================


@pytest.mark.parametrize("name,size", [("BPSK", 2), ("QPSK", 4), ("16QAM", 16)])
def test_constellation_unit_energy(name, size):
    c = Constellation.from_name(name)
    assert c.size == size
    assert abs(np.sum(c.priors * np.abs(c.points) ** 2) - 1) < 1e-12
    assert abs(c.priors.sum() - 1) < 1e-12


def test_constellation_validation():
    with pytest.raises(ConfigError):
        Constellation(np.array([2.0, -2.0]), np.array([0.5, 0.5]))
    with pytest.raises(ConfigError):
        Constellation(np.array([1.0, -1.0]), np.array([0.7, 0.7]))
    with pytest.raises(ConfigError):
        Constellation.from_name("8PSK")


def test_nearest():
    c = Constellation.from_name("QPSK")
    idx = c.nearest(c.points * 0.9 + 0.01)
    assert np.array_equal(idx, np.arange(4))


# ============================================================================
# CORRELATION
# ============================================================================


class TestCorrelation:
    def test_identity_scaled(self):
        R = make_correlation(CorrelationSpec("identity-scaled", 4)).matrix
        np.testing.assert_array_equal(R, 0.25 * np.eye(4))

    def test_exponential_zero_alpha(self):
        R = make_correlation(CorrelationSpec("exponential", 8, 0.0)).matrix
        np.testing.assert_array_equal(R, np.eye(8) / 8)

    def test_exponential_hand_values(self):
        R = make_correlation(CorrelationSpec("exponential", 2, 0.5 + 0.5j)).matrix
        expected = np.array([[0.5, (0.5 - 0.5j) / 2], [(0.5 + 0.5j) / 2, 0.5]])
        np.testing.assert_allclose(R, expected, atol=1e-15)

    def test_diagonal_exact(self):
        R = make_correlation(CorrelationSpec("exponential", 16, 0.5 + 0.5j)).matrix
        assert np.all(np.diag(R) == 1 / 16)

    def test_bad_alpha(self):
        with pytest.raises(BadAlphaError):
            make_correlation(CorrelationSpec("exponential", 4, 1.0))

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            make_correlation(CorrelationSpec("toeplitz", 4))


class TestDoppler:
    def test_static(self):
        assert eta_from_doppler(0.0, 1e-3) == 1.0

    def test_158_kmh_point(self):
        # independent root of J0(2 pi x) = 0.985 lies near x = 0.039, not 0.0195
        x = float(mpmath.findroot(lambda v: mpmath.besselj(0, 2 * mpmath.pi * v) - 0.985, 0.04))
        assert abs(eta_from_doppler(x, 1.0) - 0.985) < 1e-9
        assert abs(eta_from_doppler(0.0195, 1.0) - float(mpmath.besselj(0, 2 * mpmath.pi * 0.0195))) < 1e-12

    def test_clamped_at_first_zero(self):
        x = 2.404825557695773 / (2 * np.pi)
        assert eta_from_doppler(x * 1.01, 1.0) == 0.0

    def test_invalid(self):
        with pytest.raises(ConfigError):
            eta_from_doppler(-1.0, 1e-3)


# ============================================================================
# GAUSS-MARKOV EVOLUTION
# ============================================================================


def _params(eta, M=4, K=2, alpha=0.5 + 0.5j, **kw):
    R = make_correlation(CorrelationSpec("exponential", M, alpha))
    return GaussMarkovParams(np.full(K, eta), R, **kw)


class TestEvolve:
    def test_frozen_channel(self):
        p = _params(1.0)
        rng = rng_stream(0)
        h0 = evolve_channel(rng, None, p)
        assert np.array_equal(evolve_channel(rng, h0, p), h0)

    def test_memoryless_limit(self):
        p = _params(0.0, M=3, K=1)
        rng = rng_stream(1)
        prev = np.full((3, 1), 100.0 + 0j)
        draws = np.stack([evolve_channel(rng, prev, p)[:, 0] for _ in range(20_000)])
        R = p.R[0].matrix
        emp = draws.T @ draws.conj() / draws.shape[0]
        assert np.linalg.norm(emp - R) / np.linalg.norm(R) < 0.05

    def test_shape_check(self):
        p = _params(0.9)
        with pytest.raises(ConfigError):
            evolve_channel(rng_stream(0), np.zeros((3, 2)), p)

    def test_invalid_eta(self):
        with pytest.raises(ConfigError):
            _params(1.2)

    def test_slowly_varying_draws_are_clamped(self):
        p = _params(0.99, eta_mode="slowly-varying", eta_var=1e-2)
        etas = p.draw_etas(rng_stream(0), 500)
        assert etas.shape == (500, 2)
        assert etas.max() <= 1.0 and etas.min() >= 0.0
        assert len(np.unique(etas[:, 0])) > 1

    def test_frame_redraw_is_constant(self):
        p = _params(0.97, eta_mode="slowly-varying", eta_var=5e-5, redraw="frame")
        etas = p.draw_etas(rng_stream(0), 10)
        assert np.all(etas == etas[0])

    def test_cross_user_independence(self):
        p = _params(0.9, M=2, K=2)
        rng = rng_stream(3)
        h = evolve_channel(rng, None, p)
        acc = np.zeros((2, 2), dtype=complex)
        n = 20_000
        for _ in range(n):
            h = evolve_channel(rng, h, p)
            acc += np.outer(h[:, 0], h[:, 1].conj())
        assert np.abs(acc / n).max() < 0.03


class TestNoiseVariance:
    @pytest.mark.parametrize(
        "snr,M,K,expected", [(0, 32, 4, 0.125), (10, 1, 1, 0.1), (20, 64, 4, 6.25e-4)]
    )
    def test_values(self, snr, M, K, expected):
        assert noise_variance_from_snr(snr, M, K) == pytest.approx(expected, rel=1e-12)


# ============================================================================
# PILOTS AND LAYOUT
# ============================================================================


def test_dft_pilots_orthogonal():
    P = dft_pilots(4, 8)
    np.testing.assert_allclose(P @ P.conj().T, 8 * np.eye(4), atol=1e-12)
    np.testing.assert_allclose(np.abs(P), 1.0)


def test_dft_pilots_need_length():
    with pytest.raises(ConfigError):
        dft_pilots(4, 3)


def test_split_evenly():
    assert split_evenly(8, 2) == [4, 4]
    assert sum(split_evenly(128, 3)) == 128


class TestLayout:
    def test_default_frame(self):
        lay = FrameLayout.interleaved(8, 128, 1)
        assert lay.T == 136 and lay.pilot_mask.sum() == 8
        assert np.all(lay.pilot_mask[:8])

    def test_two_sections(self):
        lay = FrameLayout.interleaved(8, 128, 2)
        pilots = np.flatnonzero(lay.pilot_mask) + 1  # 1-based slots
        assert list(pilots) == [1, 2, 3, 4, 69, 70, 71, 72]
        assert lay.section_starts == [0, 68]

    def test_mismatch(self):
        with pytest.raises(ConfigError):
            FrameLayout((4, 4), (64,))


# ============================================================================
# FRAMES
# ============================================================================


class TestFrame:
    def test_noiseless(self):
        p = _params(0.985, M=8, K=4)
        fr = generate_frame(rng_stream(0), p, Constellation.from_name("QPSK"), FrameLayout.interleaved(8, 16), 0.0)
        np.testing.assert_allclose(fr.Y, np.einsum("tmk,tk->tm", fr.H, fr.X), atol=0)

    def test_single_user_pilot(self):
        p = _params(0.985, M=4, K=1)
        fr = generate_frame(rng_stream(1), p, Constellation.from_name("QPSK"), FrameLayout.interleaved(2, 4), 0.3)
        y = fr.H[0, :, 0] * fr.X[0, 0] + np.sqrt(0.3) * fr.noise[0]
        np.testing.assert_array_equal(fr.Y[0], y)
        assert fr.X[0, 0] == 1.0

    def test_pilot_mask(self):
        p = _params(0.985, M=4, K=4)
        fr = generate_frame(rng_stream(2), p, Constellation.from_name("QPSK"), FrameLayout.interleaved(8, 128), 1.0)
        assert fr.pilot_mask.sum() == 8 and fr.T == 136
        assert np.all(fr.x_index[:8] == -1) and np.all(fr.x_index[8:] >= 0)
        np.testing.assert_allclose(fr.pilots @ fr.pilots.conj().T, 8 * np.eye(4), atol=1e-12)

    def test_bit_identical(self):
        p = _params(0.97, M=4, K=2)
        c, lay = Constellation.from_name("16QAM"), FrameLayout.interleaved(4, 10)
        a = generate_frame(rng_stream(9, 3), p, c, lay, 0.1)
        b = generate_frame(rng_stream(9, 3), p, c, lay, 0.1)
        assert a.digest() == b.digest()

    def test_rescale_keeps_draws(self):
        p = _params(0.97, M=4, K=2)
        fr = generate_frame(rng_stream(0), p, Constellation.from_name("QPSK"), FrameLayout.interleaved(4, 10), 1.0)
        low = fr.with_noise_variance(0.01)
        assert low.H is fr.H and low.noise is fr.noise
        np.testing.assert_allclose(low.Y - np.einsum("tmk,tk->tm", fr.H, fr.X), 0.1 * fr.noise)

    def test_stack(self):
        p = _params(0.97, M=4, K=2)
        c, lay = Constellation.from_name("QPSK"), FrameLayout.interleaved(4, 10)
        fs = [generate_frame(rng_stream(0, t), p, c, lay, 1.0) for t in range(3)]
        st = stack_frames(fs)
        assert st.H.shape == (3, 14, 4, 2) and st.Y.shape == (3, 14, 4)
        np.testing.assert_array_equal(st.Y[1], fs[1].Y)

"""Tests for the closed-form variational expectations.

The Monte-Carlo oracles draw the random matrix, symbols and received vector
jointly and average the quadratic directly.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vbjed.channel import Constellation
from vbjed.errors import DimensionMismatchError
from vbjed.numerics import rng_stream, sample_complex_gaussian
from vbjed.vb_expectations import (
    GaussianStat,
    ScalarGaussianStat,
    SymbolPMF,
    expected_residual_sq,
    expected_residual_sq_det_x,
    expected_weighted_quadratic,
    second_moment,
)


def random_psd(rng, m, scale=1.0):
    A = rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))
    return scale * (A @ A.conj().T) / m


def cn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def random_instance(seed, m=3, n=2):
    rng = np.random.default_rng(seed)
    return dict(
        y=cn(rng, m),
        a_means=cn(rng, m, n),
        a_covs=np.stack([random_psd(rng, m, 0.5) for _ in range(n)]),
        x_mean=cn(rng, n),
        x_var=rng.uniform(0.1, 1.0, n),
    )


def mc_residual(inst, n_samples=1_000_000, seed=0, chunk=250_000):
    """Average of ||y - A x||^2 over joint draws of A and x."""
    rng = rng_stream(seed)
    m, n = inst["a_means"].shape
    total = 0.0
    for start in range(0, n_samples, chunk):
        s = min(chunk, n_samples - start)
        A = np.stack(
            [sample_complex_gaussian(rng, inst["a_means"][:, j], inst["a_covs"][j], size=s) for j in range(n)],
            axis=-1,
        )
        x = inst["x_mean"] + np.sqrt(inst["x_var"]) * cn(rng, s, n)
        r = inst["y"] - np.einsum("smn,sn->sm", A, x)
        total += np.sum(np.abs(r) ** 2)
    return total / n_samples


def mc_weighted(y_stat, a_stat, x_stat, W, n_samples=1_000_000, seed=0, chunk=250_000):
    rng = rng_stream(seed)
    total = 0.0
    for start in range(0, n_samples, chunk):
        s = min(chunk, n_samples - start)
        y = sample_complex_gaussian(rng, y_stat.mean, y_stat.cov, size=s)
        a = sample_complex_gaussian(rng, a_stat.mean, a_stat.cov, size=s)
        x = x_stat.mean + np.sqrt(x_stat.var) * cn(rng, s)
        r = y - a * x[:, None]
        total += np.sum(np.real(np.einsum("si,ij,sj->s", r.conj(), W, r)))
    return total / n_samples


def weighted_instance(seed, m=4):
    rng = np.random.default_rng(seed)
    y_stat = GaussianStat(cn(rng, m), random_psd(rng, m, 0.3))
    a_stat = GaussianStat(cn(rng, m), random_psd(rng, m, 0.3))
    x_stat = ScalarGaussianStat(rng.uniform(0.5, 1.0), rng.uniform(0.01, 0.2))
    W = random_psd(rng, m) + 0.5 * np.eye(m)
    return y_stat, a_stat, x_stat, W


# ============================================================================
# EXPECTED RESIDUAL
# ============================================================================


class TestExpectedResidual:
    def test_deterministic_limit(self):
        inst = random_instance(0)
        zero = np.zeros_like(inst["a_covs"])
        got = expected_residual_sq(inst["y"], inst["a_means"], zero, inst["x_mean"], np.zeros(2))
        direct = np.sum(np.abs(inst["y"] - inst["a_means"] @ inst["x_mean"]) ** 2)
        assert got == pytest.approx(direct, rel=1e-14)

    def test_single_trace_term(self):
        m = 5
        got = expected_residual_sq(np.zeros(m), np.zeros((m, 1)), np.eye(m)[None], np.zeros(1), np.ones(1))
        assert got == pytest.approx(m, rel=1e-15)

    def test_monte_carlo(self):
        inst = random_instance(11)
        assert expected_residual_sq(**inst) == pytest.approx(mc_residual(inst), rel=0.01)

    @pytest.mark.parametrize("seed", range(20))
    def test_monte_carlo_seeds(self, seed):
        inst = random_instance(100 + seed)
        assert expected_residual_sq(**inst) == pytest.approx(mc_residual(inst, seed=seed), rel=0.01)

    def test_dimension_mismatch(self):
        inst = random_instance(0)
        with pytest.raises(DimensionMismatchError):
            expected_residual_sq(inst["y"], inst["a_means"], inst["a_covs"], np.zeros(3), np.zeros(3))
        with pytest.raises(DimensionMismatchError):
            expected_residual_sq(np.zeros(4), inst["a_means"], inst["a_covs"], inst["x_mean"], inst["x_var"])

    def test_unitary_invariance(self):
        inst = random_instance(3)
        rng = np.random.default_rng(4)
        U, _ = np.linalg.qr(cn(rng, 3, 3))
        rot = dict(
            inst,
            y=U @ inst["y"],
            a_means=U @ inst["a_means"],
            a_covs=U @ inst["a_covs"] @ U.conj().T,
        )
        assert expected_residual_sq(**rot) == pytest.approx(expected_residual_sq(**inst), rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31), m=st.integers(1, 6), n=st.integers(1, 4))
    def test_nonnegative(self, seed, m, n):
        assert expected_residual_sq(**random_instance(seed, m, n)) >= 0

    def test_batched(self):
        insts = [random_instance(s) for s in range(3)]
        stacked = {k: np.stack([i[k] for i in insts]) for k in insts[0]}
        out = expected_residual_sq(**stacked)
        np.testing.assert_allclose(out, [expected_residual_sq(**i) for i in insts], rtol=1e-14)


class TestDeterministicSymbols:
    def test_plain_residual(self):
        inst = random_instance(0)
        got = expected_residual_sq_det_x(inst["y"], inst["a_means"], np.zeros_like(inst["a_covs"]), inst["x_mean"])
        assert got == pytest.approx(np.sum(np.abs(inst["y"] - inst["a_means"] @ inst["x_mean"]) ** 2), rel=1e-14)

    def test_hand_value(self):
        cov = np.diag([1.5, 0.5])[None]
        got = expected_residual_sq_det_x(np.zeros(2), np.zeros((2, 1)), cov, np.array([1.0]))
        assert got == pytest.approx(2.0, rel=1e-15)

    def test_matches_zero_variance(self):
        inst = random_instance(8)
        a = expected_residual_sq_det_x(inst["y"], inst["a_means"], inst["a_covs"], inst["x_mean"])
        b = expected_residual_sq(inst["y"], inst["a_means"], inst["a_covs"], inst["x_mean"], np.zeros(2))
        assert a == b


# ============================================================================
# WEIGHTED QUADRATIC
# ============================================================================


class TestWeightedQuadratic:
    def test_deterministic_limit(self):
        y, a, x, W = weighted_instance(0)
        y0 = GaussianStat(y.mean, np.zeros((4, 4)))
        a0 = GaussianStat(a.mean, np.zeros((4, 4)))
        r = y.mean - a.mean * x.mean
        got = expected_weighted_quadratic(y0, a0, ScalarGaussianStat(x.mean, 0.0), W)
        assert got == pytest.approx(np.real(r.conj() @ W @ r), rel=1e-14)

    def test_identity_weight_reduces(self):
        y, a, x, _ = weighted_instance(1)
        y0 = GaussianStat(y.mean, np.zeros((4, 4)))
        got = expected_weighted_quadratic(y0, a, x, np.eye(4))
        ref = expected_residual_sq(y.mean, a.mean[:, None], a.cov[None], np.atleast_1d(x.mean), np.atleast_1d(x.var))
        assert got == pytest.approx(ref, rel=1e-13)

    def test_monte_carlo(self):
        y, a, x, W = weighted_instance(5)
        assert expected_weighted_quadratic(y, a, x, W) == pytest.approx(mc_weighted(y, a, x, W), rel=0.01)

    @pytest.mark.parametrize("seed", range(20))
    def test_monte_carlo_seeds(self, seed):
        y, a, x, W = weighted_instance(200 + seed)
        assert expected_weighted_quadratic(y, a, x, W) == pytest.approx(mc_weighted(y, a, x, W, seed=seed), rel=0.01)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_nonnegative(self, seed):
        assert expected_weighted_quadratic(*weighted_instance(seed)) >= 0

    def test_dimension_mismatch(self):
        y, a, x, W = weighted_instance(0)
        with pytest.raises(DimensionMismatchError):
            expected_weighted_quadratic(y, a, x, np.eye(3))


# ============================================================================
# SECOND MOMENTS
# ============================================================================


class TestSecondMoment:
    def test_scalar(self):
        assert second_moment(ScalarGaussianStat(0.97, 0.0)) == pytest.approx(0.9409, abs=1e-15)

    def test_scalar_with_variance(self):
        assert second_moment(ScalarGaussianStat(0.95, 1e-3)) == pytest.approx(0.9035, abs=1e-15)

    def test_uniform_qpsk(self):
        c = Constellation.from_name("QPSK")
        assert second_moment(SymbolPMF(c.priors, c.points)) == pytest.approx(1.0, abs=1e-15)

    def test_pmf_decomposition(self):
        c = Constellation.from_name("16QAM")
        p = np.random.default_rng(0).dirichlet(np.ones(16))
        pmf = SymbolPMF(p, c.points)
        assert second_moment(pmf) == pytest.approx(abs(pmf.mean) ** 2 + pmf.var, rel=1e-13)

    def test_unknown_type(self):
        with pytest.raises(TypeError):
            second_moment(1.0)

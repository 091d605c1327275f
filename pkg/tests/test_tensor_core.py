import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cdlnet.errors import ContractError, NumericError
from cdlnet.tensor_core import (
    FilterBank,
    coeff_shape,
    conv_analysis,
    conv_filter_grad,
    conv_synthesis,
    count_macs,
    project_unit_ball,
    soft_threshold,
    spectral_norm,
    subsample,
    zero_fill,
)
from oracles import dense_analysis_matrix, nearest_in_unit_ball, prox_l1_scalar


def delta_bank(m=1, p=3, stride=1):
    w = np.zeros((m, p, p))
    w[:, (p - 1) // 2, (p - 1) // 2] = 1.0
    return FilterBank(w, stride)


class TestSynthesis:
    def test_delta_filter_is_identity(self, rng):
        z = rng.standard_normal((1, 6, 5))
        np.testing.assert_array_equal(conv_synthesis(z, delta_bank()), z[0])

    def test_zero_input_gives_zero_image(self, rng):
        bank = FilterBank(rng.standard_normal((3, 5, 5)), 2)
        out = conv_synthesis(np.zeros((3, 4, 4)), bank)
        assert out.shape == (8, 8)
        assert not out.any()

    def test_matches_dense_matrix_4x4_stride2(self, rng):
        w = rng.standard_normal((1, 3, 3))
        z = rng.standard_normal((1, 4, 4))
        shape = (8, 8)
        S = dense_analysis_matrix(w, 2, shape).T
        got = conv_synthesis(z, FilterBank(w, 2), shape)
        np.testing.assert_allclose(got.ravel(), S @ z.ravel(), atol=1e-12)

    def test_explicit_shape_smaller_than_grid(self, rng):
        w = rng.standard_normal((2, 4, 4))
        z = rng.standard_normal((2, 3, 3))
        shape = (7, 8)
        got = conv_synthesis(z, FilterBank(w, 3), shape)
        S = dense_analysis_matrix(w, 3, shape).T
        np.testing.assert_allclose(got.ravel(), S @ z.ravel(), atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ContractError):
            conv_synthesis(rng.standard_normal((2, 4, 4)), delta_bank(m=3))

    def test_incompatible_shape(self, rng):
        with pytest.raises(ContractError):
            conv_synthesis(rng.standard_normal((1, 4, 4)), delta_bank(stride=2), (10, 8))

    def test_non_finite_input(self):
        z = np.zeros((1, 3, 3))
        z[0, 1, 1] = np.nan
        with pytest.raises(NumericError):
            conv_synthesis(z, delta_bank())

    def test_linearity(self, rng):
        bank = FilterBank(rng.standard_normal((3, 5, 5)), 2)
        z1, z2 = rng.standard_normal((2, 3, 6, 6))
        a, b = 0.7, -1.9
        lhs = conv_synthesis(a * z1 + b * z2, bank)
        rhs = a * conv_synthesis(z1, bank) + b * conv_synthesis(z2, bank)
        assert np.linalg.norm(lhs - rhs) <= 1e-6 * np.linalg.norm(rhs)

    def test_batch_axes_are_independent(self, rng):
        bank = FilterBank(rng.standard_normal((3, 5, 5)), 2)
        z = rng.standard_normal((2, 3, 3, 4, 4))
        out = conv_synthesis(z, bank, (7, 8))
        assert out.shape == (2, 3, 7, 8)
        np.testing.assert_allclose(out[1, 2], conv_synthesis(z[1, 2], bank, (7, 8)), atol=1e-12)


class TestAnalysis:
    def test_delta_stride1_is_identity(self, rng):
        x = rng.standard_normal((7, 6))
        np.testing.assert_array_equal(conv_analysis(x, delta_bank())[0], x)

    def test_delta_stride2_subsamples(self, rng):
        x = rng.standard_normal((8, 7))
        np.testing.assert_array_equal(conv_analysis(x, delta_bank(stride=2))[0], x[::2, ::2])

    @pytest.mark.parametrize("stride", [1, 2, 3])
    @pytest.mark.parametrize("p", [1, 2, 3, 4])
    def test_matches_dense_matrix(self, rng, stride, p):
        w = rng.standard_normal((2, p, p))
        x = rng.standard_normal((7, 8))
        A = dense_analysis_matrix(w, stride, x.shape)
        got = conv_analysis(x, FilterBank(w, stride))
        np.testing.assert_allclose(got.ravel(), A @ x.ravel(), atol=1e-10)

    def test_output_grid_is_ceil(self):
        out = conv_analysis(np.ones((9, 10)), delta_bank(m=2, stride=4))
        assert out.shape == (2,) + coeff_shape(9, 10, 4) == (2, 3, 3)


@settings(max_examples=60, deadline=None)
@given(
    stride=st.integers(1, 4),
    p=st.integers(1, 7),
    m=st.integers(1, 4),
    h=st.integers(1, 12),
    w=st.integers(1, 12),
    seed=st.integers(0, 2**31 - 1),
)
def test_adjoint_identity(stride, p, m, h, w, seed):
    r = np.random.default_rng(seed)
    bank = FilterBank(r.standard_normal((m, p, p)), stride)
    x = r.standard_normal((h, w))
    z = r.standard_normal((m,) + coeff_shape(h, w, stride))
    lhs = np.sum(conv_synthesis(z, bank, (h, w)) * x)
    rhs = np.sum(z * conv_analysis(x, bank))
    assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(z) * np.linalg.norm(x) * max(1.0, np.linalg.norm(bank.weights))


def test_filter_grad_matches_finite_differences(rng):
    bank = FilterBank(rng.standard_normal((2, 3, 3)), 2)
    x = rng.standard_normal((7, 6))
    c = rng.standard_normal((2,) + coeff_shape(7, 6, 2))
    g = conv_filter_grad(x, c, 3, 2)
    # <c, analysis(x, W)> is linear in W, so the gradient is exact
    for idx in np.ndindex(bank.weights.shape):
        e = np.zeros_like(bank.weights)
        e[idx] = 1.0
        assert g[idx] == pytest.approx(np.sum(c * conv_analysis(x, FilterBank(e, 2))), abs=1e-12)


class TestStrideOperators:
    @given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(-1e6, 1e6)), st.integers(1, 4))
    def test_subsample_after_zero_fill_is_identity(self, z, s):
        np.testing.assert_array_equal(subsample(zero_fill(z, s), s), z)

    def test_zero_fill_places_samples(self):
        z = np.arange(4.0).reshape(1, 2, 2)
        out = zero_fill(z, 3)
        assert out.shape == (1, 6, 6)
        assert out[0, 3, 3] == 3.0 and out.sum() == 6.0


class TestSoftThreshold:
    @pytest.mark.parametrize("v,tau,expected", [(1.5, 1.0, 0.5), (-0.3, 0.5, 0.0), (-2.0, 0.5, -1.5)])
    def test_examples(self, v, tau, expected):
        out = soft_threshold(np.full((1, 1, 1), v), np.array([tau]))
        assert out[0, 0, 0] == pytest.approx(expected, abs=1e-15)

    def test_zero_threshold_is_identity(self, rng):
        z = rng.standard_normal((3, 4, 4))
        np.testing.assert_array_equal(soft_threshold(z, np.zeros(3)), z)

    def test_matches_scalar_prox(self, rng):
        z = rng.standard_normal((3, 4, 4))
        tau = rng.uniform(0, 1, 3)
        out = soft_threshold(z, tau)
        for j, a, b in np.ndindex(z.shape):
            assert out[j, a, b] == pytest.approx(prox_l1_scalar(z[j, a, b], tau[j]), abs=1e-6)

    def test_per_sample_thresholds(self, rng):
        z = rng.standard_normal((2, 3, 4, 4))
        tau = rng.uniform(0, 1, (2, 3))
        out = soft_threshold(z, tau)
        np.testing.assert_array_equal(out[1], soft_threshold(z[1], tau[1]))

    def test_negative_threshold_rejected(self):
        with pytest.raises(ContractError):
            soft_threshold(np.zeros((2, 1, 1)), np.array([0.1, -0.1]))

    @settings(deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_non_expansive(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.standard_normal((2, 3, 5, 5)) * r.uniform(0.1, 10)
        tau = r.uniform(0, 2, 3)
        assert np.linalg.norm(soft_threshold(a, tau) - soft_threshold(b, tau)) <= np.linalg.norm(a - b) + 1e-12


class TestProjection:
    def test_large_filter_rescaled_to_unit_norm(self, rng):
        d = rng.standard_normal((1, 3, 3))
        d *= 2.0 / np.linalg.norm(d)
        out = project_unit_ball(FilterBank(d))
        assert np.linalg.norm(out.weights) == pytest.approx(1.0, abs=1e-12)
        assert np.linalg.norm(out.weights) <= 1.0
        np.testing.assert_allclose(out.weights, d / 2.0, atol=1e-15)

    def test_small_filter_unchanged(self, rng):
        d = rng.standard_normal((1, 3, 3))
        d *= 0.5 / np.linalg.norm(d)
        np.testing.assert_array_equal(project_unit_ball(d), d)

    def test_nearest_point(self, rng):
        w = rng.standard_normal((4, 3, 3)) * rng.uniform(0.1, 1.0, (4, 1, 1))
        out = project_unit_ball(w)
        for j in range(4):
            np.testing.assert_allclose(out[j].ravel(), nearest_in_unit_ball(w[j]), atol=1e-6)

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_idempotent_bitwise(self, rng, dtype):
        w = (rng.standard_normal((6, 7, 7)) * 3).astype(dtype)
        once = project_unit_ball(w)
        np.testing.assert_array_equal(project_unit_ball(once), once)
        assert np.all(np.sum(once.astype(np.float64) ** 2, axis=(1, 2)) <= 1.0)


class TestSpectralNorm:
    def test_delta_is_one(self):
        assert spectral_norm(delta_bank(), (16, 16)) == pytest.approx(1.0, abs=1e-6)

    def test_homogeneity(self, rng):
        w = rng.standard_normal((3, 3, 3))
        base = spectral_norm(FilterBank(w), (8, 8), iters=500, tol=1e-12)
        scaled = spectral_norm(FilterBank(-2.5 * w), (8, 8), iters=500, tol=1e-12)
        assert scaled == pytest.approx(2.5 * base, rel=1e-6)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_dense_svd(self, rng, stride):
        w = rng.standard_normal((3, 3, 3))
        S = dense_analysis_matrix(w, stride, (8, 8)).T
        expected = np.linalg.svd(S, compute_uv=False)[0]
        got = spectral_norm(FilterBank(w, stride), (8, 8), iters=20000, tol=1e-15)
        assert got == pytest.approx(expected, rel=1e-6)

    def test_zero_operator(self):
        assert spectral_norm(FilterBank(np.zeros((2, 3, 3))), (8, 8)) == 0.0

    def test_deterministic(self, rng):
        bank = FilterBank(rng.standard_normal((3, 5, 5)), 2)
        assert spectral_norm(bank, (16, 16), seed=3) == spectral_norm(bank, (16, 16), seed=3)


class TestFilterBank:
    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            FilterBank(np.full((1, 3, 3), np.inf))

    def test_rejects_bad_shape(self):
        with pytest.raises(ContractError):
            FilterBank(np.zeros((2, 3, 4)))

    def test_rejects_bad_stride(self):
        with pytest.raises(ContractError):
            FilterBank(np.zeros((2, 3, 3)), 0)


def test_mac_counter_counts_both_directions(rng):
    bank = FilterBank(rng.standard_normal((4, 5, 5)), 2)
    with count_macs() as box:
        c = conv_analysis(rng.standard_normal((10, 10)), bank)
        first = box[0]
        conv_synthesis(c, bank, (10, 10))
    assert first == 4 * 25 * 5 * 5
    assert box[0] == 2 * first


def test_float32_path_agrees_with_float64(rng):
    bank = FilterBank(rng.standard_normal((4, 7, 7)), 1)
    x = rng.standard_normal((16, 16))
    hi = conv_analysis(x, bank)
    lo = conv_analysis(x.astype(np.float32), bank.astype(np.float32))
    assert lo.dtype == np.float32
    np.testing.assert_allclose(lo, hi, rtol=1e-4, atol=1e-4)

"""Tests for the degradation operators and their residual gradients."""

import numpy as np
import pytest

from diffusion.operators import (
    ClipOperator,
    ClipSpec,
    LowpassOperator,
    LowpassSpec,
    MatrixOperator,
    MelOperator,
    MelSpec,
    MixOperator,
    clip_apply,
    clip_threshold_for_sdr,
    lowpass_apply,
    mel_apply,
    mix_apply,
    passband_edge_hz,
    residual_grad,
    selection_matrix,
    signal_to_distortion_db,
)

SMALL_MEL = MelSpec(n_fft=64, hop=16, n_mels=8)


def _half_residual(op, x, y):
    return 0.5 * np.sum((y - op.apply(x)) ** 2)


def _directional_error(op, x, y, rng, h=1e-6):
    v = rng.standard_normal(x.shape)
    v /= np.linalg.norm(v)
    fd = (_half_residual(op, x + h * v, y) - _half_residual(op, x - h * v, y)) / (2.0 * h)
    analytic = np.sum(residual_grad(op, x, y) * v)
    return abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8)


class TestLowpass:
    def test_preserves_dc(self):
        np.testing.assert_allclose(lowpass_apply(np.ones(400), LowpassSpec()), np.ones(400), atol=1e-12)

    def test_passes_low_and_removes_high_tones(self):
        n = np.arange(4000)
        low = np.sin(2.0 * np.pi * 500.0 * n / 16000.0)
        high = np.sin(2.0 * np.pi * 6000.0 * n / 16000.0)
        spec = LowpassSpec()
        middle = slice(500, 3500)
        np.testing.assert_allclose(lowpass_apply(low, spec)[middle], low[middle], atol=0.02)
        assert np.max(np.abs(lowpass_apply(high, spec)[middle])) < 0.01

    def test_shape_is_preserved(self):
        x = np.zeros((2, 3, 300))
        assert lowpass_apply(x, LowpassSpec()).shape == x.shape

    def test_too_short(self):
        with pytest.raises(ValueError):
            lowpass_apply(np.zeros(100), LowpassSpec())

    def test_adjoint_identity(self):
        rng = np.random.default_rng(0)
        op = LowpassOperator(LowpassSpec(taps=33))
        x, r = rng.standard_normal(200), rng.standard_normal(200)
        assert np.dot(op.apply(x), r) == pytest.approx(np.dot(x, op.adjoint(r)), rel=1e-10)

    def test_passband_edge(self):
        assert passband_edge_hz(LowpassSpec()) == pytest.approx(2000.0 - 32000.0 / 129)
        assert passband_edge_hz(LowpassSpec(cutoff_hz=100.0, taps=33)) == 0.0


class TestClip:
    def test_matches_abs_formula(self):
        x = np.random.default_rng(1).standard_normal(1000) * 2.0
        c = 0.3
        np.testing.assert_allclose(clip_apply(x, ClipSpec(c)), 0.5 * (np.abs(x + c) - np.abs(x - c)), atol=1e-15)

    def test_unclipped_samples_are_bit_exact(self):
        x = np.array([-0.1, 0.0, 0.1234567, -0.3, 0.3, 0.29999999])
        np.testing.assert_array_equal(clip_apply(x, ClipSpec(0.3)), x)

    def test_threshold_must_be_positive(self):
        with pytest.raises(ValueError):
            ClipSpec(0.0)

    def test_gradient_is_zero_on_clipped_samples(self):
        x = np.array([-1.0, -0.1, 0.0, 0.2, 0.9])
        y = np.zeros(5)
        grad = ClipOperator(ClipSpec(0.5)).residual_grad(x, y)
        np.testing.assert_array_equal(grad, [0.0, -0.1, 0.0, 0.2, 0.0])

    def test_threshold_for_sdr(self):
        x = np.random.default_rng(2).standard_normal(4000)
        for target in (3.0, 10.0):
            c = clip_threshold_for_sdr(x, target)
            assert 0.0 < c < np.max(np.abs(x))
            assert signal_to_distortion_db(x, clip_apply(x, ClipSpec(c))) == pytest.approx(target, abs=1e-6)

    def test_threshold_for_sdr_rejects_silence(self):
        with pytest.raises(ValueError):
            clip_threshold_for_sdr(np.zeros(10), 5.0)


class TestMel:
    def test_shapes(self):
        op = MelOperator(SMALL_MEL)
        assert op.apply(np.zeros(256) + 0.1).shape == (8, 17)
        assert op.output_shape((3, 256)) == (3, 8, 17)
        assert op.input_shape((3, 8, 17)) == (3, 256)

    def test_floor(self):
        out = mel_apply(np.zeros(128), SMALL_MEL)
        np.testing.assert_allclose(out, np.log(SMALL_MEL.log_floor))

    def test_too_short(self):
        with pytest.raises(ValueError):
            mel_apply(np.zeros(32), SMALL_MEL)

    def test_fmax_default(self):
        assert MelSpec().fmax_hz == 8000.0
        assert MelSpec(fmax=4000.0).fmax_hz == 4000.0


class TestMix:
    def test_apply(self):
        x1, x2 = np.arange(4.0), np.ones(4)
        np.testing.assert_array_equal(mix_apply(x1, x2), x1 + 1.0)
        np.testing.assert_array_equal(MixOperator().apply(np.stack([x1, x2])), x1 + 1.0)

    def test_shapes(self):
        op = MixOperator()
        assert op.input_shape((3, 100)) == (3, 2, 100)
        assert op.output_shape((3, 2, 100)) == (3, 100)

    def test_rejects_unstacked_state(self):
        with pytest.raises(ValueError):
            MixOperator().apply(np.zeros((3, 100)))
        with pytest.raises(ValueError):
            mix_apply(np.zeros(3), np.zeros(4))


class TestResidualGradients:
    """Directional finite differences of 0.5 * ||y - A(x)||^2."""

    @pytest.mark.parametrize(
        "op, shape",
        [
            (LowpassOperator(LowpassSpec(taps=33)), (2, 120)),
            (MelOperator(SMALL_MEL), (256,)),
            (MixOperator(), (2, 2, 50)),
            (MatrixOperator(selection_matrix(10, [1, 4, 7])), (3, 10)),
        ],
    )
    def test_directional_derivative(self, op, shape):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(shape)
        y = op.apply(rng.standard_normal(shape))
        for _ in range(3):
            assert _directional_error(op, x, y, rng) < 1e-4

    def test_clip_directional_derivative(self):
        rng = np.random.default_rng(4)
        op = ClipOperator(ClipSpec(0.5))
        x = rng.uniform(-1.0, 1.0, 300)
        x = x[np.abs(np.abs(x) - 0.5) > 1e-3]
        y = op.apply(rng.standard_normal(x.shape))
        assert _directional_error(op, x, y, rng) < 1e-4

    @pytest.mark.parametrize(
        "op, shape",
        [
            (LowpassOperator(LowpassSpec(taps=33)), (120,)),
            (ClipOperator(), (100,)),
            (MelOperator(SMALL_MEL), (256,)),
            (MixOperator(), (2, 50)),
            (MatrixOperator(np.eye(6)), (6,)),
        ],
    )
    def test_zero_at_consistent_observation(self, op, shape):
        x = np.random.default_rng(5).standard_normal(shape)
        assert np.max(np.abs(residual_grad(op, x, op.apply(x)))) < 1e-10

    def test_matrix_operator_shapes(self):
        op = MatrixOperator(selection_matrix(10, [0, 3]))
        assert op.output_shape((4, 10)) == (4, 2)
        assert op.input_shape((4, 2)) == (4, 10)

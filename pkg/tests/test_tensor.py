import numpy as np
import pytest

from hierspec.errors import FiniteError, ShapeError
from hierspec.tensor import matmul, rms_norm, rope_apply, silu, softmax_rows

F32 = np.float32


def triple_loop_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Naive reference: ascending-k accumulation in float64, rounded once."""
    m, k = a.shape
    k2, n = b.shape
    out = np.empty((m, n), dtype=F32)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for kk in range(k):
                acc += float(a[i, kk]) * float(b[kk, j])
            out[i, j] = F32(acc)
    return out


class TestMatmul:
    def test_identity(self):
        b = np.arange(6, dtype=F32).reshape(2, 3)
        assert np.array_equal(matmul(np.eye(2, dtype=F32), b), b)

    def test_zeros(self):
        z = matmul(np.zeros((2, 3), F32), np.ones((3, 4), F32))
        assert np.array_equal(z, np.zeros((2, 4), F32))

    def test_hand_value(self):
        a = np.array([[1, 2], [3, 4]], dtype=F32)
        b = np.array([[5, 6], [7, 8]], dtype=F32)
        assert np.array_equal(matmul(a, b), np.array([[19, 22], [43, 50]], F32))

    def test_agrees_with_triple_loop_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a = rng.normal(0, 1, (8, 8)).astype(F32)
            b = rng.normal(0, 1, (8, 8)).astype(F32)
            assert np.array_equal(matmul(a, b), triple_loop_matmul(a, b))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3), F32), np.ones((4, 2), F32))

    def test_rejects_nonfinite(self):
        a = np.full((2, 2), np.inf, dtype=F32)
        with pytest.raises(FiniteError):
            matmul(a, a)

    def test_deterministic_across_calls(self):
        rng = np.random.default_rng(5)
        a = rng.normal(0, 1, (16, 16)).astype(F32)
        b = rng.normal(0, 1, (16, 16)).astype(F32)
        assert matmul(a, b).tobytes() == matmul(a, b).tobytes()


class TestSoftmaxRows:
    def test_constant_row_uniform(self):
        out = softmax_rows(np.full((3, 5), 2.5, F32))
        assert np.allclose(out, 0.2, atol=1e-7)

    def test_hand_value(self):
        out = softmax_rows(np.array([[0.0, np.log(2.0)]], F32), scale=1.0)
        assert np.allclose(out, [[1 / 3, 2 / 3]], atol=1e-6)

    def test_near_one_hot(self):
        row = np.array([[0.0, 1e4, 0.0]], F32)
        out = softmax_rows(row)
        assert abs(out[0, 1] - 1.0) < 1e-6
        assert out[0, 0] < 1e-6

    def test_rows_sum_to_one_and_nonnegative(self):
        rng = np.random.default_rng(7)
        x = rng.normal(0, 5, (20, 300)).astype(F32)
        out = softmax_rows(x, scale=0.3)
        assert (out >= 0).all()
        assert np.abs(out.astype(np.float64).sum(axis=1) - 1.0).max() < 1e-6

    def test_scale_applied_before_exp(self):
        x = np.array([[0.0, 1.0]], F32)
        out = softmax_rows(x, scale=np.log(3.0))
        assert np.allclose(out, [[0.25, 0.75]], atol=1e-6)


class TestRmsNorm:
    def test_zeros(self):
        out = rms_norm(np.zeros((2, 4), F32), np.ones(4, F32), 1e-5)
        assert np.allclose(out, 0.0)

    def test_unit_fixpoint(self):
        x = np.ones((3, 8), F32)
        out = rms_norm(x, np.ones(8, F32), 0.0)
        assert np.allclose(out, 1.0, atol=1e-7)

    def test_hand_value(self):
        out = rms_norm(np.array([[3.0, 4.0]], F32), np.ones(2, F32), 0.0)
        expected = np.array([3.0, 4.0]) / np.sqrt(12.5)
        assert np.allclose(out, expected, atol=1e-6)

    def test_gain_mismatch(self):
        with pytest.raises(ShapeError):
            rms_norm(np.ones((2, 4), F32), np.ones(3, F32), 1e-5)


class TestRope:
    def test_position_zero_identity(self):
        rng = np.random.default_rng(0)
        x = rng.normal(0, 1, (1, 8)).astype(F32)
        assert np.allclose(rope_apply(x, [0], 10000.0), x, atol=1e-7)

    def test_single_rotation_hand_value(self):
        # pair 0 rotates by exactly pos radians for any theta
        out = rope_apply(np.array([[1.0, 0.0]], F32), [1], theta=123.4)
        assert np.allclose(out, [[np.cos(1.0), np.sin(1.0)]], atol=1e-6)

    def test_norm_preserved(self):
        rng = np.random.default_rng(1)
        x = rng.normal(0, 1, (6, 16)).astype(F32)
        out = rope_apply(x, np.arange(100, 106), 10000.0)
        assert np.allclose(np.linalg.norm(out, axis=-1),
                           np.linalg.norm(x, axis=-1), atol=1e-5)

    def test_odd_head_dim_rejected(self):
        with pytest.raises(ShapeError):
            rope_apply(np.ones((1, 3), F32), [0], 10000.0)

    def test_broadcasts_over_heads(self):
        rng = np.random.default_rng(2)
        x = rng.normal(0, 1, (3, 4, 8)).astype(F32)
        out = rope_apply(x, [5, 6, 7], 10000.0)
        for h in range(4):
            assert np.array_equal(out[:, h], rope_apply(x[:, h], [5, 6, 7], 10000.0))


def test_silu_matches_definition():
    x = np.linspace(-6, 6, 25, dtype=F32)
    expected = x.astype(np.float64) / (1.0 + np.exp(-x.astype(np.float64)))
    assert np.allclose(silu(x), expected, atol=1e-6)

import math

import numpy as np
import pytest

from tmfront.numerics import (
    MASK_SENTINEL,
    AttentionWeights,
    FullyMaskedRowError,
    ShapeError,
    cosine_similarity,
    cosine_similarity_matrix,
    directional_derivative_check,
    layer_norm,
    matmul,
    multi_head_attention,
    scaled_dot_attention,
    scaled_dot_attention_jvp,
    softmax,
    softmax_jvp,
)


class TestMatmul:
    def test_identity(self, rng):
        x = rng.normal(size=(2, 2))
        np.testing.assert_array_equal(matmul(np.eye(2), x), x)

    def test_hand_product(self):
        np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[5], [6]]), [[17], [39]])

    def test_zero_annihilates(self, rng):
        out = matmul(np.zeros((2, 3)), rng.normal(size=(3, 4)))
        np.testing.assert_array_equal(out, np.zeros((2, 4)))

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_associativity(self, rng):
        for _ in range(50):
            m, k, n, p = rng.integers(1, 9, size=4)
            a, b, c = rng.normal(size=(m, k)), rng.normal(size=(k, n)), rng.normal(size=(n, p))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-12)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax([0, 0, 0, 0]), [0.25] * 4, atol=1e-15)

    def test_masked_position(self):
        p = softmax([5.0, 5.0], mask=[0.0, MASK_SENTINEL])
        assert p[0] == pytest.approx(1.0, abs=1e-12)
        assert p[1] < 1e-12

    def test_closed_form(self):
        np.testing.assert_allclose(softmax([1.0, 2.0]), [0.26894, 0.73106], atol=1e-5)

    def test_fully_masked_row(self):
        with pytest.raises(FullyMaskedRowError, match="fully masked attention row"):
            softmax([[1.0, 2.0]], mask=[[MASK_SENTINEL, MASK_SENTINEL]])

    def test_rows_sum_to_one(self, rng):
        for _ in range(1000):
            n = int(rng.integers(1, 65))
            row = rng.normal(scale=rng.uniform(0.1, 50.0), size=n)
            assert abs(softmax(row).sum() - 1.0) <= 1e-12

    def test_large_logits_stable(self):
        p = softmax([1000.0, 1000.0, -1000.0])
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p, [0.5, 0.5, 0.0], atol=1e-15)


class TestLayerNorm:
    def test_constant_row_collapses_to_beta(self):
        np.testing.assert_allclose(layer_norm([3.0, 3.0, 3.0], np.ones(3), np.zeros(3)), 0.0)

    def test_two_values(self):
        out = layer_norm([1.0, 3.0], np.ones(2), np.zeros(2), eps=1e-14)
        np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-9)

    def test_zero_gamma_gives_beta(self, rng):
        beta = rng.normal(size=5)
        out = layer_norm(rng.normal(size=(4, 5)), np.zeros(5), beta)
        np.testing.assert_allclose(out, np.broadcast_to(beta, (4, 5)))

    def test_standardizes_rows(self, rng):
        x = rng.normal(3.0, 5.0, size=(20, 16))
        out = layer_norm(x, np.ones(16), np.zeros(16), eps=1e-14)
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-9)

    def test_affine_shape_checked(self):
        with pytest.raises(ShapeError):
            layer_norm(np.ones((2, 3)), np.ones(2), np.zeros(3))


class TestCosine:
    def test_self(self):
        assert cosine_similarity([3.0, -1.0], [3.0, -1.0]) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine_similarity([1, 0], [0, 1]) == 0.0

    def test_diagonal(self):
        assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-5)

    def test_zero_norm(self):
        with pytest.raises(ValueError, match="zero-norm token"):
            cosine_similarity([0, 0], [1, 0])

    def test_scale_invariant(self, rng):
        for _ in range(100):
            u = rng.normal(size=7)
            c = rng.uniform(1e-3, 1e3)
            assert abs(cosine_similarity(u, c * u) - 1.0) <= 1e-12

    def test_matrix_symmetric_and_matches_pairwise(self, rng):
        t = rng.normal(size=(12, 5))
        s = cosine_similarity_matrix(t)
        np.testing.assert_array_equal(s, s.T)
        for i in range(12):
            for j in range(12):
                assert s[i, j] == pytest.approx(cosine_similarity(t[i], t[j]), abs=1e-14)


class TestAttention:
    def test_single_key(self, rng):
        v = rng.normal(size=(1, 3))
        out = scaled_dot_attention(rng.normal(size=(4, 2)), rng.normal(size=(1, 2)), v)
        np.testing.assert_allclose(out, np.repeat(v, 4, axis=0), atol=1e-15)

    def test_orthogonal_query_averages(self, rng):
        k = np.array([[0.0, 1.0], [0.0, -2.0], [0.0, 5.0]])
        v = rng.normal(size=(3, 4))
        out = scaled_dot_attention(np.array([[1.0, 0.0]]), k, v)
        np.testing.assert_allclose(out[0], v.mean(axis=0), atol=1e-15)

    def test_two_key_closed_form(self, rng):
        v = rng.normal(size=(2, 3))
        out = scaled_dot_attention([[1.0]], [[0.0], [math.log(3.0)]], v)
        np.testing.assert_allclose(out[0], 0.25 * v[0] + 0.75 * v[1], atol=1e-9)

    def test_zero_mask_bit_identical(self, rng):
        q, k, v = rng.normal(size=(5, 4)), rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
        a = scaled_dot_attention(q, k, v)
        b = scaled_dot_attention(q, k, v, mask=np.zeros((5, 6)))
        assert np.array_equal(a, b)

    def test_rows_are_convex_combinations(self, rng):
        v = rng.normal(size=(6, 2))
        out = scaled_dot_attention(rng.normal(size=(20, 3)), rng.normal(size=(6, 3)), v)
        assert np.all(out <= v.max(axis=0) + 1e-12)
        assert np.all(out >= v.min(axis=0) - 1e-12)

    def test_fully_masked_propagates(self):
        with pytest.raises(FullyMaskedRowError):
            scaled_dot_attention([[1.0]], [[1.0]], [[1.0]], mask=[[MASK_SENTINEL]])

    def test_multi_head_single_head_matches_plain(self, rng):
        d = 6
        w = AttentionWeights.identity(d)
        x = rng.normal(size=(5, d))
        np.testing.assert_allclose(multi_head_attention(x, x, w), scaled_dot_attention(x, x, x), atol=1e-14)

    def test_multi_head_matches_per_head_loop(self, rng):
        d, h = 8, 4
        mats = [rng.normal(size=(d, d)) for _ in range(4)]
        biases = [rng.normal(size=d) for _ in range(4)]
        w = AttentionWeights(mats[0], biases[0], mats[1], biases[1], mats[2], biases[2], mats[3], biases[3], h)
        q_in, kv_in = rng.normal(size=(3, d)), rng.normal(size=(7, d))
        q = q_in @ mats[0] + biases[0]
        k = kv_in @ mats[1] + biases[1]
        v = kv_in @ mats[2] + biases[2]
        hd = d // h
        heads = [scaled_dot_attention(q[:, i * hd:(i + 1) * hd], k[:, i * hd:(i + 1) * hd], v[:, i * hd:(i + 1) * hd])
                 for i in range(h)]
        expected = np.concatenate(heads, axis=1) @ mats[3] + biases[3]
        np.testing.assert_allclose(multi_head_attention(q_in, kv_in, w), expected, atol=1e-12)


class TestDirectionalDerivative:
    def test_linear(self, rng):
        d = rng.normal(size=6)
        a, n = directional_derivative_check(np.sum, rng.normal(size=6), d, 1e-5, lambda x, dx: dx.sum())
        assert a == pytest.approx(d.sum(), abs=1e-10)
        assert n == pytest.approx(d.sum(), abs=1e-10)

    def test_squared_norm(self):
        a, n = directional_derivative_check(
            lambda x: float(x @ x), [1.0, 2.0], [1.0, 0.0], 1e-5, lambda x, d: float(2 * x @ d)
        )
        assert a == pytest.approx(2.0, abs=1e-6)
        assert n == pytest.approx(2.0, abs=1e-6)

    def test_softmax_component(self):
        a, n = directional_derivative_check(
            lambda x: softmax(x)[0], [0.0, 0.0], [1.0, 0.0], 1e-5, lambda x, d: softmax_jvp(x, d)[0]
        )
        assert a == pytest.approx(0.25, abs=1e-5)
        assert n == pytest.approx(0.25, abs=1e-5)

    def test_attention_jvp(self, rng):
        q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 2))
        dq, dk, dv = rng.normal(size=q.shape), rng.normal(size=k.shape), rng.normal(size=v.shape)
        eps = 1e-6
        fd = (scaled_dot_attention(q + eps * dq, k + eps * dk, v + eps * dv)
              - scaled_dot_attention(q - eps * dq, k - eps * dk, v - eps * dv)) / (2 * eps)
        np.testing.assert_allclose(scaled_dot_attention_jvp(q, k, v, dq, dk, dv), fd, atol=1e-8)

    def test_step_bounds(self):
        with pytest.raises(ValueError):
            directional_derivative_check(np.sum, [1.0], [1.0], 1e-2, lambda x, d: 1.0)

    def test_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            directional_derivative_check(lambda x: float("inf"), [1.0], [1.0], 1e-5, lambda x, d: 0.0)

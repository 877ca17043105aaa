import numpy as np
import pytest

from iclattn.attention import (dense_structured_reference, full_attention,
                               score_storage, structured_attention)
from iclattn.segments import RelativeBiasTable, SegmentLayout, permute_segments
from iclattn.tensor import Tensor, backward, tsum


def full_layout(k, L):
    return SegmentLayout(k, L, (L,) * (k + 1))


def random_qkv(rng, heads, T, d):
    return tuple(Tensor(rng.standard_normal((heads, T, d))) for _ in range(3))


class TestEqualLogitExample:
    def test_k2_l1_uniform_mix(self):
        """With all queries and keys equal, each demo row averages its own
        value with the test value, and the test row averages all three."""
        k, L, d = 2, 1, 4
        layout = full_layout(k, L)
        q = Tensor(np.ones((1, 3, d)))
        key = Tensor(np.ones((1, 3, d)))
        v = Tensor(np.arange(12, dtype=float).reshape(1, 3, d))
        out = structured_attention(q, key, v, layout).data
        vals = v.data[0]
        np.testing.assert_allclose(out[0, 0], (vals[0] + vals[2]) / 2, atol=1e-12)
        np.testing.assert_allclose(out[0, 1], (vals[1] + vals[2]) / 2, atol=1e-12)
        np.testing.assert_allclose(out[0, 2], vals.mean(axis=0), atol=1e-12)


class TestOracleEquivalence:
    @pytest.mark.parametrize("k,L,heads", [(0, 1, 1), (0, 3, 2), (1, 1, 1),
                                           (2, 2, 2), (4, 3, 1), (6, 5, 2)])
    def test_matches_dense_reference(self, k, L, heads):
        rng = np.random.default_rng(k * 100 + L * 10 + heads)
        layout = full_layout(k, L)
        q, key, v = random_qkv(rng, heads, layout.total_length, 8)
        fast = structured_attention(q, key, v, layout).data
        dense = dense_structured_reference(q, key, v, layout, table=None).data
        assert np.abs(fast - dense).max() <= 1e-9

    def test_matches_dense_with_padding(self):
        rng = np.random.default_rng(7)
        layout = SegmentLayout(3, 4, (4, 2, 3, 1))
        q, key, v = random_qkv(rng, 2, layout.total_length, 8)
        fast = structured_attention(q, key, v, layout).data
        dense = dense_structured_reference(q, key, v, layout, table=None).data
        valid = layout.key_valid()
        assert np.abs(fast[:, valid] - dense[:, valid]).max() <= 1e-9

    def test_matches_dense_with_bias(self):
        rng = np.random.default_rng(8)
        layout = full_layout(3, 2)
        table = RelativeBiasTable(2, num_buckets=8, max_distance=16,
                                  rng=rng, init_std=0.5)
        q, key, v = random_qkv(rng, 2, layout.total_length, 8)
        fast = structured_attention(q, key, v, layout,
                                    bias_block=table.bias_block(2)).data
        dense = dense_structured_reference(q, key, v, layout, table=table).data
        assert np.abs(fast - dense).max() <= 1e-9

    def test_merged_batch_head_axis(self):
        """Leading axis can be batch*heads; each slice must equal the
        corresponding one-head call."""
        rng = np.random.default_rng(9)
        layout = full_layout(2, 3)
        q, key, v = random_qkv(rng, 6, layout.total_length, 4)
        merged = structured_attention(q, key, v, layout).data
        for h in range(6):
            single = structured_attention(
                Tensor(q.data[h:h + 1]), Tensor(key.data[h:h + 1]),
                Tensor(v.data[h:h + 1]), layout).data
            np.testing.assert_allclose(merged[h], single[0], atol=1e-12)


class TestPermutationEquivariance:
    def test_demo_outputs_permute_test_invariant(self):
        rng = np.random.default_rng(10)
        layout = full_layout(5, 3)
        q, key, v = random_qkv(rng, 2, layout.total_length, 8)
        perm = tuple(rng.permutation(5))
        out = structured_attention(q, key, v, layout).data
        qp = Tensor(permute_segments(layout, q.data, perm, axis=1))
        kp = Tensor(permute_segments(layout, key.data, perm, axis=1))
        vp = Tensor(permute_segments(layout, v.data, perm, axis=1))
        out_p = structured_attention(qp, kp, vp, layout).data
        expected = permute_segments(layout, out, perm, axis=1)
        assert np.abs(out_p - expected).max() <= 1e-9

    def test_full_attention_not_invariant(self):
        """Control: with a position-dependent bias, dense attention over the
        same inputs is sensitive to demo order."""
        rng = np.random.default_rng(11)
        layout = full_layout(3, 2)
        table = RelativeBiasTable(1, num_buckets=8, max_distance=16,
                                  rng=rng, init_std=1.0)
        from iclattn.segments import bias_for_layout, build_full_mask
        q, key, v = random_qkv(rng, 1, layout.total_length, 4)
        mask = build_full_mask(layout)
        bias = bias_for_layout(table, layout, structured=False)
        out = full_attention(q, key, v, mask=mask, bias=bias).data
        perm = (2, 0, 1)
        qp = Tensor(permute_segments(layout, q.data, perm, axis=1))
        kp = Tensor(permute_segments(layout, key.data, perm, axis=1))
        vp = Tensor(permute_segments(layout, v.data, perm, axis=1))
        out_p = full_attention(qp, kp, vp, mask=mask, bias=bias).data
        test_rows = out[:, -2:], out_p[:, -2:]
        assert np.abs(test_rows[0] - test_rows[1]).max() > 1e-6


class TestScoreStorage:
    def test_k1_equal(self):
        s = score_storage(1, 4)
        assert s["full"] == s["structured"] == 64

    def test_k4_l3(self):
        assert score_storage(4, 3) == {"full": 225, "structured": 117}

    @pytest.mark.parametrize("k,L", [(0, 1), (2, 5), (8, 64), (128, 64)])
    def test_closed_forms(self, k, L):
        s = score_storage(k, L)
        assert s["full"] == ((k + 1) * L) ** 2
        assert s["structured"] == (3 * k + 1) * L * L

    def test_ratio_grows_linearly(self):
        r32 = score_storage(32, 64)
        r64 = score_storage(64, 64)
        ratio = (r64["full"] / r64["structured"]) / (r32["full"] / r32["structured"])
        assert 1.5 < ratio < 2.5


class TestGradients:
    def test_backward_matches_dense_reference(self):
        rng = np.random.default_rng(12)
        layout = full_layout(2, 2)
        raw = [rng.standard_normal((1, 6, 4)) for _ in range(3)]

        def grads(fn):
            ts = [Tensor(a.copy(), requires_grad=True) for a in raw]
            out = fn(*ts)
            backward(tsum(out))
            return [t.grad.copy() for t in ts]

        fast = grads(lambda q, k, v: structured_attention(q, k, v, layout))
        dense = grads(lambda q, k, v: dense_structured_reference(q, k, v, layout, table=None))
        for a, b in zip(fast, dense):
            np.testing.assert_allclose(a, b, atol=1e-9)

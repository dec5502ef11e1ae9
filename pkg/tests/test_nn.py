"""Unit tests for attention and transformer blocks."""

import numpy as np
import pytest

from anomsearch.nn import (
    AttentionParams,
    CrossAttentionBlock,
    FeedForward,
    Linear,
    TransformerBlock,
    multi_head_attention,
)
from anomsearch.tensor import Tensor, gradient_check, precision


def _attn(dim, heads, seed=0):
    return AttentionParams(np.random.default_rng(seed), dim, heads)


def _reference_attention(q, k, v, params):
    """Per-head python-loop reference for multi_head_attention on [L, D] inputs."""
    wq, wk, wv, wo = (params.wq.W.numpy(), params.wk.W.numpy(),
                      params.wv.W.numpy(), params.wo.W.numpy())
    H, d = params.heads, params.head_dim
    qh = (q @ wq).reshape(-1, H, d)
    kh = (k @ wk).reshape(-1, H, d)
    vh = (v @ wv).reshape(-1, H, d)
    out = np.zeros((q.shape[0], H, d))
    for h in range(H):
        scores = qh[:, h] @ kh[:, h].T / np.sqrt(d)
        scores -= scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=-1, keepdims=True)
        out[:, h] = w @ vh[:, h]
    return out.reshape(q.shape[0], -1) @ wo


class TestAttention:
    def test_single_key_collapses_softmax(self):
        # With one kv token the attention weight is exactly 1, so the output
        # is W_o applied to the value projection of that token.
        with precision("float64"):
            params = _attn(6, 2, seed=1)
            kv = np.random.default_rng(2).normal(size=(1, 6))
            q = np.random.default_rng(3).normal(size=(3, 6))
            got = multi_head_attention(Tensor(q), Tensor(kv), params).numpy()
        want = np.tile(kv @ params.wv.W.numpy() @ params.wo.W.numpy(), (3, 1))
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_zero_value_projection_gives_zero_output(self):
        params = _attn(8, 4, seed=4)
        params.wv.W.data[:] = 0.0
        x = Tensor(np.random.default_rng(5).normal(size=(5, 8)))
        out = multi_head_attention(x, x, params).numpy()
        assert np.all(out == 0.0)

    def test_matches_per_head_reference(self):
        with precision("float64"):
            params = _attn(12, 3, seed=6)
            q = np.random.default_rng(7).normal(size=(4, 12))
            kv = np.random.default_rng(8).normal(size=(6, 12))
            got = multi_head_attention(Tensor(q), Tensor(kv), params).numpy()
        want = _reference_attention(q, kv, kv, params)
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_batched_matches_unbatched(self):
        with precision("float64"):
            params = _attn(8, 2, seed=9)
            batch = np.random.default_rng(10).normal(size=(3, 5, 8))
            got = multi_head_attention(Tensor(batch), Tensor(batch), params).numpy()
            for b in range(3):
                single = multi_head_attention(
                    Tensor(batch[b]), Tensor(batch[b]), params).numpy()
                np.testing.assert_allclose(got[b], single, atol=1e-10)

    def test_weights_rows_sum_to_one(self):
        params = _attn(8, 2, seed=11)
        q = Tensor(np.random.default_rng(12).normal(size=(4, 8)))
        kv = Tensor(np.random.default_rng(13).normal(size=(7, 8)))
        _, weights = multi_head_attention(q, kv, params, return_weights=True)
        assert weights.shape == (2, 4, 7)
        np.testing.assert_allclose(weights.numpy().sum(axis=-1), 1.0, atol=1e-6)

    def test_kv_permutation_invariance(self):
        # Attention is a weighted sum over kv tokens; reordering them must not
        # change the output.
        with precision("float64"):
            params = _attn(8, 2, seed=14)
            rng = np.random.default_rng(15)
            q = rng.normal(size=(3, 8))
            kv = rng.normal(size=(6, 8))
            perm = rng.permutation(6)
            base = multi_head_attention(Tensor(q), Tensor(kv), params).numpy()
            shuffled = multi_head_attention(Tensor(q), Tensor(kv[perm]), params).numpy()
        np.testing.assert_allclose(base, shuffled, atol=1e-10)

    def test_dim_not_divisible_by_heads(self):
        with pytest.raises(ValueError):
            _attn(10, 4)

    def test_token_dim_mismatch(self):
        params = _attn(8, 2)
        with pytest.raises(ValueError):
            multi_head_attention(Tensor(np.zeros((3, 6))), Tensor(np.zeros((3, 6))), params)

    def test_gradients(self):
        with precision("float64"):
            params = _attn(6, 2, seed=16)
            x = Tensor(np.random.default_rng(17).normal(size=(4, 6)), requires_grad=True)
            tensors = [x] + list(params.parameters("a").values())
            report = gradient_check(
                lambda: multi_head_attention(x, x, params).sum(), tensors)
        assert report.max_rel_err < 1e-6, report


class TestLinearAndFFN:
    def test_linear_formula(self):
        with precision("float64"):
            lin = Linear(np.random.default_rng(18), 4, 3)
            lin.b.data[:] = np.arange(3.0)
            x = np.random.default_rng(19).normal(size=(5, 4))
            got = lin(Tensor(x)).numpy()
        np.testing.assert_allclose(got, x @ lin.W.numpy() + lin.b.numpy(), atol=1e-12)

    def test_linear_no_bias(self):
        lin = Linear(np.random.default_rng(20), 4, 3, bias=False)
        assert lin.b is None
        assert set(lin.parameters("p")) == {"p.W"}

    def test_ffn_gradients(self):
        with precision("float64"):
            ffn = FeedForward(np.random.default_rng(21), 4, 8)
            x = Tensor(np.random.default_rng(22).normal(size=(3, 4)), requires_grad=True)
            tensors = [x] + list(ffn.parameters("f").values())
            report = gradient_check(lambda: ffn(x).sum(), tensors)
        assert report.max_rel_err < 1e-6, report


class TestBlocks:
    def test_transformer_block_shape_preserved(self):
        block = TransformerBlock(np.random.default_rng(23), 8, 2)
        x = Tensor(np.random.default_rng(24).normal(size=(2, 5, 8)))
        assert block(x).shape == (2, 5, 8)

    def test_zeroed_block_is_identity(self):
        # With all output-side weights zero, both residual branches contribute
        # nothing and the block is the identity map.
        block = TransformerBlock(np.random.default_rng(25), 8, 2)
        block.attn.wo.W.data[:] = 0.0
        block.ffn.lin2.W.data[:] = 0.0
        block.ffn.lin2.b.data[:] = 0.0
        x = np.random.default_rng(26).normal(size=(5, 8)).astype(np.float32)
        np.testing.assert_array_equal(block(Tensor(x)).numpy(), x)

    def test_parameter_names(self):
        block = TransformerBlock(np.random.default_rng(27), 8, 2)
        names = set(block.parameters("enc.0"))
        assert "enc.0.attn.wq.W" in names
        assert "enc.0.ffn.lin1.b" in names
        assert "enc.0.ln1.gamma" in names
        assert len(names) == len(block.parameters("x"))  # prefix only renames

    def test_transformer_block_gradients(self):
        with precision("float64"):
            block = TransformerBlock(np.random.default_rng(28), 4, 2, ff_mult=2)
            x = Tensor(np.random.default_rng(29).normal(size=(3, 4)), requires_grad=True)
            tensors = [x] + list(block.parameters("b").values())
            report = gradient_check(lambda: block(x).sum(), tensors)
        assert report.max_rel_err < 1e-6, report

    def test_cross_block_uses_kv(self):
        block = CrossAttentionBlock(np.random.default_rng(30), 8, 2)
        rng = np.random.default_rng(31)
        x = Tensor(rng.normal(size=(4, 8)))
        kv_a = Tensor(rng.normal(size=(6, 8)))
        kv_b = Tensor(rng.normal(size=(6, 8)))
        out_a = block(x, kv_a).numpy()
        out_b = block(x, kv_b).numpy()
        assert not np.allclose(out_a, out_b)

    def test_cross_block_zero_cross_value_ignores_kv(self):
        block = CrossAttentionBlock(np.random.default_rng(32), 8, 2)
        block.cross_attn.wv.W.data[:] = 0.0
        rng = np.random.default_rng(33)
        x = Tensor(rng.normal(size=(4, 8)))
        out_a = block(x, Tensor(rng.normal(size=(6, 8)))).numpy()
        out_b = block(x, Tensor(rng.normal(size=(3, 8)))).numpy()
        np.testing.assert_array_equal(out_a, out_b)

    def test_cross_block_gradients(self):
        with precision("float64"):
            block = CrossAttentionBlock(np.random.default_rng(34), 4, 2, ff_mult=2)
            rng = np.random.default_rng(35)
            x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            kv = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
            tensors = [x, kv] + list(block.parameters("c").values())
            report = gradient_check(lambda: block(x, kv).sum(), tensors)
        assert report.max_rel_err < 1e-6, report

"""Transformer building blocks shared by the image, text, and cross encoders.

All modules expose `parameters(prefix)` returning a flat name -> Tensor dict;
the names ("<encoder>.<block_index>.<param_name>") are the checkpoint keys.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    Tensor,
    concat,
    gelu,
    layer_norm,
    matmul,
    softmax,
    swapaxes,
)

__all__ = ["Linear", "AttentionParams", "FeedForward", "TransformerBlock",
           "CrossAttentionBlock", "LayerNormParams", "multi_head_attention"]


def _init_weight(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    """Affine map over the last axis: y = x @ W + b."""

    def __init__(self, rng, in_dim, out_dim, bias=True):
        self.W = Tensor(_init_weight(rng, in_dim, out_dim), requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def __call__(self, x):
        y = matmul(x, self.W)
        if self.b is not None:
            y = y + self.b
        return y

    def parameters(self, prefix):
        params = {f"{prefix}.W": self.W}
        if self.b is not None:
            params[f"{prefix}.b"] = self.b
        return params


class LayerNormParams:
    def __init__(self, dim, eps=1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, eps=self.eps)

    def parameters(self, prefix):
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}


class AttentionParams:
    """Projection weights for one multi-head attention module.

    Projections carry no biases so that a zeroed value projection makes the
    whole module output exactly zero (relied on by the pose-off equivalence).
    """

    def __init__(self, rng, dim, heads):
        if dim % heads != 0:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(rng, dim, dim, bias=False)
        self.wk = Linear(rng, dim, dim, bias=False)
        self.wv = Linear(rng, dim, dim, bias=False)
        self.wo = Linear(rng, dim, dim, bias=False)

    def parameters(self, prefix):
        params = {}
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            params.update(lin.parameters(f"{prefix}.{name}"))
        return params


def _split_heads(x, heads, head_dim):
    # [..., L, D] -> [..., H, L, d]
    shape = x.shape[:-1] + (heads, head_dim)
    return swapaxes(x.reshape(shape), -3, -2)


def _merge_heads(x, dim):
    # [..., H, L, d] -> [..., L, D]
    merged = swapaxes(x, -3, -2)
    return merged.reshape(merged.shape[:-2] + (dim,))


def multi_head_attention(q_tokens, kv_tokens, params, return_weights=False):
    """Scaled dot-product attention; self-attention is q_tokens == kv_tokens.

    Accepts [L, D] or batched [B, L, D] token tensors.
    """
    if q_tokens.shape[-1] != params.dim or kv_tokens.shape[-1] != params.dim:
        raise ValueError(
            f"token dim mismatch: q {q_tokens.shape}, kv {kv_tokens.shape}, model dim {params.dim}"
        )
    q = _split_heads(params.wq(q_tokens), params.heads, params.head_dim)
    k = _split_heads(params.wk(kv_tokens), params.heads, params.head_dim)
    v = _split_heads(params.wv(kv_tokens), params.heads, params.head_dim)
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(params.head_dim))
    weights = softmax(scores, axis=-1)
    out = params.wo(_merge_heads(matmul(weights, v), params.dim))
    if return_weights:
        return out, weights
    return out


class FeedForward:
    def __init__(self, rng, dim, hidden_dim):
        self.lin1 = Linear(rng, dim, hidden_dim)
        self.lin2 = Linear(rng, hidden_dim, dim)

    def __call__(self, x):
        return self.lin2(gelu(self.lin1(x)))

    def parameters(self, prefix):
        return {**self.lin1.parameters(f"{prefix}.lin1"),
                **self.lin2.parameters(f"{prefix}.lin2")}


class TransformerBlock:
    """Pre-norm residual block: x + Attn(LN(x)); then x + FFN(LN(x))."""

    def __init__(self, rng, dim, heads, ff_mult=4):
        self.attn = AttentionParams(rng, dim, heads)
        self.ffn = FeedForward(rng, dim, dim * ff_mult)
        self.ln1 = LayerNormParams(dim)
        self.ln2 = LayerNormParams(dim)

    def __call__(self, x):
        normed = self.ln1(x)
        x = x + multi_head_attention(normed, normed, self.attn)
        x = x + self.ffn(self.ln2(x))
        return x

    def parameters(self, prefix):
        return {**self.attn.parameters(f"{prefix}.attn"),
                **self.ffn.parameters(f"{prefix}.ffn"),
                **self.ln1.parameters(f"{prefix}.ln1"),
                **self.ln2.parameters(f"{prefix}.ln2")}


class CrossAttentionBlock:
    """Cross-encoder layer: self-attention over text, cross-attention with the
    text as queries and the fused image tokens as keys/values, then FFN."""

    def __init__(self, rng, dim, heads, ff_mult=4):
        self.self_attn = AttentionParams(rng, dim, heads)
        self.cross_attn = AttentionParams(rng, dim, heads)
        self.ffn = FeedForward(rng, dim, dim * ff_mult)
        self.ln_self = LayerNormParams(dim)
        self.ln_cross = LayerNormParams(dim)
        self.ln_ffn = LayerNormParams(dim)

    def __call__(self, x, kv_tokens):
        normed = self.ln_self(x)
        x = x + multi_head_attention(normed, normed, self.self_attn)
        x = x + multi_head_attention(self.ln_cross(x), kv_tokens, self.cross_attn)
        x = x + self.ffn(self.ln_ffn(x))
        return x

    def parameters(self, prefix):
        return {**self.self_attn.parameters(f"{prefix}.self_attn"),
                **self.cross_attn.parameters(f"{prefix}.cross_attn"),
                **self.ffn.parameters(f"{prefix}.ffn"),
                **self.ln_self.parameters(f"{prefix}.ln_self"),
                **self.ln_cross.parameters(f"{prefix}.ln_cross"),
                **self.ln_ffn.parameters(f"{prefix}.ln_ffn")}

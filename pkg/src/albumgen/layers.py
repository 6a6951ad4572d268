"""Reusable neural blocks: linear, layer norm, single-head attention,
transformer blocks, and sinusoidal embeddings.

Token tensors are (batch, tokens, width) throughout; attention is
single-head, which is plenty at the widths this package runs at.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Module, Tensor


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.w = T.xavier(rng, d_in, d_out)
        self.b = T.init_zeros((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.w
        return out + self.b if self.b is not None else out


class LayerNorm(Module):
    def __init__(self, width: int):
        self.gain = T.init_ones((width,))
        self.bias = T.init_zeros((width,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, axis=-1)


class Attention(Module):
    """Single-head scaled dot-product attention, query and context inputs.

    Self-attention is `__call__(x, x)`. No positional information is added
    here, so the context side is a pure set of tokens.
    """

    def __init__(self, rng, d_q: int, d_kv: int | None = None, d_out: int | None = None):
        d_kv = d_q if d_kv is None else d_kv
        d_out = d_q if d_out is None else d_out
        self.wq = Linear(rng, d_q, d_q, bias=False)
        self.wk = Linear(rng, d_kv, d_q, bias=False)
        self.wv = Linear(rng, d_kv, d_q, bias=False)
        self.wo = Linear(rng, d_q, d_out)
        self._scale = 1.0 / math.sqrt(d_q)

    def __call__(self, q_in: Tensor, kv_in: Tensor) -> Tensor:
        q = self.wq(q_in)
        k = self.wk(kv_in)
        v = self.wv(kv_in)
        scores = (q @ T.permute(k, (0, 2, 1))) * self._scale
        att = T.softmax(scores, axis=-1)
        return self.wo(att @ v)


class FeedForward(Module):
    def __init__(self, rng, width: int, mult: int = 2):
        self.fc1 = Linear(rng, width, width * mult)
        self.fc2 = Linear(rng, width * mult, width)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.silu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm self-attention + feed-forward with residuals."""

    def __init__(self, rng, width: int, ff_mult: int = 2):
        self.norm1 = LayerNorm(width)
        self.attn = Attention(rng, width)
        self.norm2 = LayerNorm(width)
        self.ff = FeedForward(rng, width, ff_mult)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.ff(self.norm2(x))


class CrossBlock(Module):
    """Pre-norm cross-attention (fixed query set onto a context) + FF."""

    def __init__(self, rng, width: int, ff_mult: int = 2):
        self.norm_q = LayerNorm(width)
        self.norm_kv = LayerNorm(width)
        self.attn = Attention(rng, width)
        self.norm2 = LayerNorm(width)
        self.ff = FeedForward(rng, width, ff_mult)

    def __call__(self, q: Tensor, kv: Tensor) -> Tensor:
        q = q + self.attn(self.norm_q(q), self.norm_kv(kv))
        return q + self.ff(self.norm2(q))


def sinusoidal_embedding(positions: np.ndarray, dim: int, max_period: float = 10_000.0) -> np.ndarray:
    """Classic sin/cos embedding. positions (N,) -> (N, dim) float32."""
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(np.float32)

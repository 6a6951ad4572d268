"""Feature fusion for conditioning: learnable query tokens cross-attend to
the concatenated (reference-image, modification-text) tokens, producing a
fixed-size token set that approximates the target image's features.

The alignment loss distributionalizes each token by a channel softmax and
takes a KL divergence toward the target-side features (resampled through
the same queries and output projection so both sides share one space).
Teacher forcing swaps the fused tokens for the target-side tokens with a
fixed per-sample probability during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import CrossBlock, Linear
from .rng import make_rng
from .tensor import Module, Tensor


class FusionAdapter(Module):
    """Query-based projection: L_q learnable queries over a token context.

    Output is always (B, n_queries, d_out) regardless of how many context
    tokens come in. No positional encoding is added to the context, so the
    context is an unordered token set.
    """

    def __init__(self, width: int = 64, n_queries: int = 4, blocks: int = 2,
                 d_out: int = 64, seed: int = 0):
        rng = make_rng(seed, 0xF0)
        self.width = width
        self.n_queries = n_queries
        self.queries = T.init_normal(rng, (n_queries, width), std=1.0)
        self.blocks = [CrossBlock(rng, width) for _ in range(blocks)]
        self.out_proj = Linear(rng, width, d_out)

    def project(self, context: Tensor) -> Tensor:
        """Resample an arbitrary token set through the learned queries."""
        if context.shape[-1] != self.width:
            raise ValueError(f"context width {context.shape[-1]} != {self.width}")
        b = context.shape[0]
        q = T.reshape(self.queries, (1, self.n_queries, self.width))
        q = q + T.zeros((b, self.n_queries, self.width))  # broadcast per batch
        for block in self.blocks:
            q = block(q, context)
        return self.out_proj(q)

    def fuse(self, f_ref: Tensor, f_text: Tensor) -> Tensor:
        """Project the concatenation of reference and text tokens."""
        if f_ref.shape[-1] != f_text.shape[-1]:
            raise ValueError(f"token widths differ: {f_ref.shape[-1]} vs {f_text.shape[-1]}")
        return self.project(T.concatenate([f_ref, f_text], axis=1))

    def resample_target(self, f_target: Tensor) -> Tensor:
        """Map target-image tokens into the fused space (same queries and
        output projection), making the alignment loss shape-compatible."""
        return self.project(f_target)


def align_loss(f_fused: Tensor, f_target: Tensor) -> Tensor:
    """KL(channel-softmax(fused) || channel-softmax(target)), token-averaged.

    Each token becomes a distribution over its channels at temperature 1;
    the per-token KL is summed over channels and averaged over tokens (and
    batch). Non-negative, zero iff the distributions match.
    """
    if f_fused.shape != f_target.shape:
        raise ValueError(f"shape mismatch: {f_fused.shape} vs {f_target.shape}")
    p = T.softmax(f_fused, axis=-1)
    logp = T.log_softmax(f_fused, axis=-1)
    logq = T.log_softmax(f_target, axis=-1)
    per_token = T.sum_(p * (logp - logq), axis=-1)
    return T.mean_(per_token)


@dataclass
class TeacherForcingPolicy:
    """Per-sample replacement of fused features by target features."""

    pro: float
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.pro <= 1.0:
            raise ValueError(f"pro must be in [0, 1], got {self.pro}")
        self.rng = make_rng(self.seed, 0x7F)

    def draw(self, n: int) -> np.ndarray:
        return self.rng.random(n) < self.pro


def teacher_select(f_fused: Tensor, f_target: Tensor,
                   policy: TeacherForcingPolicy) -> tuple[Tensor, np.ndarray]:
    """One draw per sample: with probability pro hand the denoiser the
    target features instead of the fused ones. Gradient flows through
    whichever branch each sample takes. Returns (tokens, replaced mask)."""
    if f_fused.shape != f_target.shape:
        raise ValueError(f"shape mismatch: {f_fused.shape} vs {f_target.shape}")
    replaced = policy.draw(f_fused.shape[0])
    out = T.where_mask(replaced[:, None, None], f_target, f_fused)
    return out, replaced

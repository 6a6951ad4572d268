"""Toy text and image encoders producing token features.

Both encoders emit (batch, tokens, width) tensors: the currency passed to
the fusion adapter and to the denoiser's cross-attention paths. The text
side runs over a closed vocabulary built from the modification grammar,
which keeps instruction-following exactly measurable downstream.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import tensor as T
from .layers import Linear, TransformerBlock, sinusoidal_embedding
from .rng import make_rng
from .synthdata import instruction_words
from .tensor import Module, Tensor

PAD_ID = 0
UNK_ID = 1


class Vocabulary:
    """Bijective word <-> id mapping with reserved PAD=0 and UNK=1."""

    def __init__(self, words: list[str]):
        self.words = ["<pad>", "<unk>"] + list(words)
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate words in vocabulary")
        self.ids = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.words) + "\n", encoding="utf-8")

    @staticmethod
    def load(path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[:2] != ["<pad>", "<unk>"]:
            raise ValueError("vocabulary file missing reserved entries")
        return Vocabulary(lines[2:])


def default_vocabulary() -> Vocabulary:
    return Vocabulary(instruction_words())


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> np.ndarray:
    """Whitespace-split, lowercase, map to ids, pad/truncate to max_len."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids = [vocab.ids.get(w, UNK_ID) for w in text.lower().split()]
    ids = ids[:max_len]
    ids += [PAD_ID] * (max_len - len(ids))
    return np.asarray(ids, dtype=np.int64)


class TextEncoder(Module):
    """Embedding + sinusoidal positions + transformer blocks.

    encode(ids) with ids (B, max_len) int64 -> (B, max_len, d).
    """

    def __init__(self, vocab_size: int, width: int = 64, blocks: int = 2,
                 max_len: int = 16, seed: int = 0):
        rng = make_rng(seed, 0x7E)
        self.width = width
        self.max_len = max_len
        self.vocab_size = vocab_size
        self.embed = T.init_normal(rng, (vocab_size, width))
        self._pos = sinusoidal_embedding(np.arange(max_len), width)
        self.blocks = [TransformerBlock(rng, width) for _ in range(blocks)]

    def encode(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[1] != self.max_len:
            raise ValueError(f"expected {self.max_len} ids per row, got {ids.shape[1]}")
        h = T.gather_rows(self.embed, ids) + Tensor(self._pos)
        for block in self.blocks:
            h = block(h)
        return h


class ImageEncoder(Module):
    """Patchify -> linear projection -> transformer blocks.

    encode(images) with images (B, C, H, W) -> (B, (H/p)*(W/p), d).
    """

    def __init__(self, width: int = 64, blocks: int = 2, patch: int = 8,
                 channels: int = 3, image_size: int = 32, seed: int = 0):
        if image_size % patch != 0:
            raise ValueError(f"image size {image_size} not divisible by patch {patch}")
        rng = make_rng(seed, 0x1E)
        self.width = width
        self.patch = patch
        self.channels = channels
        self.image_size = image_size
        self.tokens = (image_size // patch) ** 2
        self.proj = Linear(rng, channels * patch * patch, width)
        self.pos = T.init_normal(rng, (self.tokens, width))
        self.blocks = [TransformerBlock(rng, width) for _ in range(blocks)]

    def encode(self, images: Tensor) -> Tensor:
        if images.ndim == 3:
            images = T.reshape(images, (1,) + images.shape)
        b, c, h, w = images.shape
        p = self.patch
        if c != self.channels or h != self.image_size or w != self.image_size:
            raise ValueError(f"expected (B, {self.channels}, {self.image_size}, "
                             f"{self.image_size}) images, got {images.shape}")
        # (B,C,H,W) -> (B, gh, gw, C, p, p) -> (B, gh*gw, C*p*p)
        x = T.reshape(images, (b, c, h // p, p, w // p, p))
        x = T.permute(x, (0, 2, 4, 1, 3, 5))
        x = T.reshape(x, (b, self.tokens, c * p * p))
        h_tok = self.proj(x) + self.pos
        for block in self.blocks:
            h_tok = block(h_tok)
        return h_tok

"""The denoising UNet, the parallel reference encoder, and the decoupled
attention block that merges their streams.

Layout per level i (channels base*mults[i], resolution size/2^i):

    encoder   conv_in -> [ResBlock -> Downsample]*        (attention-free)
    middle    ResBlock -> DecoupledAttention -> ResBlock
    decoder   [ResBlock(skip cat) -> DecoupledAttention? -> Upsample]*

The encoder trunk is attention-free so the reference encoder can be an
exact architectural twin of it (independent weights, plain 3-channel
input, fixed timestep embedding): their parameter counts match one to
one. All attention sits in the middle and decoder and runs the decoupled
block: self-attention averaged with cross-attention onto reference tokens,
then additive cross-attention onto text tokens and fusion tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import Attention, FeedForward, LayerNorm, Linear, sinusoidal_embedding
from .rng import make_rng
from .tensor import Module, Tensor


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 32
    channels: int = 3
    base: int = 32
    mults: tuple[int, ...] = (1, 2, 4)
    attn_levels: tuple[int, ...] = (1, 2)   # decoder levels with attention
    text_width: int = 64
    ip_width: int = 64
    text_len: int = 16
    ip_tokens: int = 4
    ff_mult: int = 2

    def __post_init__(self):
        object.__setattr__(self, "mults", tuple(self.mults))
        object.__setattr__(self, "attn_levels", tuple(self.attn_levels))
        levels = len(self.mults)
        if self.image_size % (2 ** (levels - 1)) != 0:
            raise ValueError(f"image size {self.image_size} not divisible by "
                             f"2^{levels - 1}")
        if any(not 0 <= a < levels for a in self.attn_levels):
            raise ValueError(f"attention levels {self.attn_levels} outside range")

    @property
    def level_channels(self) -> tuple[int, ...]:
        return tuple(self.base * m for m in self.mults)

    @property
    def temb_width(self) -> int:
        return self.base * 4


class ChannelNorm(Module):
    """Layer norm over the channel axis of NCHW maps."""

    def __init__(self, channels: int):
        self.gain = T.init_ones((channels, 1, 1))
        self.bias = T.init_zeros((channels, 1, 1))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, axis=1)


class ResBlock(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, temb_width: int):
        self.norm1 = ChannelNorm(in_ch)
        self.conv1 = T.kaiming_conv(rng, out_ch, in_ch, 3)
        self.bias1 = T.init_zeros((out_ch,))
        self.temb_proj = Linear(rng, temb_width, out_ch)
        self.norm2 = ChannelNorm(out_ch)
        self.conv2 = T.init_zeros((out_ch, out_ch, 3, 3))  # zero-init residual
        self.bias2 = T.init_zeros((out_ch,))
        if in_ch != out_ch:
            self.skip = T.kaiming_conv(rng, out_ch, in_ch, 1)
        else:
            self.skip = None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = T.conv2d(T.silu(self.norm1(x)), self.conv1, self.bias1, padding=1)
        tadd = self.temb_proj(T.silu(temb))
        h = h + T.reshape(tadd, tadd.shape + (1, 1))
        h = T.conv2d(T.silu(self.norm2(h)), self.conv2, self.bias2, padding=1)
        sk = x if self.skip is None else T.conv2d(x, self.skip)
        return h + sk


class DecoupledAttentionBlock(Module):
    """Self-attention averaged with reference cross-attention, then
    additive text and fusion-token cross-attention, then feed-forward.

    m   = h + lam*SelfAttn(h) + (1-lam)*CrossAttn(h, ref)
    m2  = m + CrossAttn(m, txt) + s_ip*CrossAttn(m, ip)
    out = m2 + FF(m2)

    lam = 1 (or ref absent) skips the reference branch entirely, so
    outputs are bitwise independent of the reference; likewise s_ip = 0
    (or ip absent) for the fusion branch.
    """

    def __init__(self, rng, width: int, text_width: int, ip_width: int,
                 ff_mult: int = 2):
        self.norm_h = LayerNorm(width)
        self.self_attn = Attention(rng, width)
        self.ref_attn = Attention(rng, width)
        self.norm_cross = LayerNorm(width)
        self.txt_attn = Attention(rng, width, d_kv=text_width)
        self.ip_attn = Attention(rng, width, d_kv=ip_width)
        self.norm_ff = LayerNorm(width)
        self.ff = FeedForward(rng, width, ff_mult)

    def __call__(self, h: Tensor, ref: Tensor | None, txt: Tensor | None,
                 ip: Tensor | None, lambda_self: float = 0.5,
                 s_ip: float = 1.0) -> Tensor:
        hn = self.norm_h(h)
        a = self.self_attn(hn, hn)
        if ref is None or lambda_self == 1.0:
            m = h + a
        else:
            b = self.ref_attn(hn, ref)
            m = h + a * float(lambda_self) + b * float(1.0 - lambda_self)
        mn = self.norm_cross(m)
        if txt is not None:
            m = m + self.txt_attn(mn, txt)
        if ip is not None and s_ip != 0.0:
            m = m + self.ip_attn(mn, ip) * float(s_ip)
        return m + self.ff(self.norm_ff(m))


class TimestepEmbedding(Module):
    def __init__(self, rng, width: int):
        self.width = width
        self.fc1 = Linear(rng, width, width)
        self.fc2 = Linear(rng, width, width)

    def __call__(self, t: np.ndarray) -> Tensor:
        base = sinusoidal_embedding(np.atleast_1d(t).astype(np.float64), self.width)
        return self.fc2(T.silu(self.fc1(Tensor(base))))


class _EncoderTrunk(Module):
    """conv_in + per-level ResBlocks with stride-2 downsampling between
    levels; shared by the denoiser and the reference encoder."""

    def __init__(self, rng, cfg: UNetConfig):
        chs = cfg.level_channels
        self.conv_in = T.kaiming_conv(rng, chs[0], cfg.channels, 3)
        self.bias_in = T.init_zeros((chs[0],))
        self.blocks = []
        self.downs = []
        self.down_biases = []
        prev = chs[0]
        for i, ch in enumerate(chs):
            self.blocks.append(ResBlock(rng, prev, ch, cfg.temb_width))
            prev = ch
            if i < len(chs) - 1:
                self.downs.append(T.kaiming_conv(rng, ch, ch, 3))
                self.down_biases.append(T.init_zeros((ch,)))

    def __call__(self, x: Tensor, temb: Tensor) -> list[Tensor]:
        """Per-level feature maps, finest first."""
        h = T.conv2d(x, self.conv_in, self.bias_in, padding=1)
        feats = []
        for i, block in enumerate(self.blocks):
            h = block(h, temb)
            feats.append(h)
            if i < len(self.downs):
                h = T.conv2d(h, self.downs[i], self.down_biases[i],
                             stride=2, padding=1)
        return feats


def _to_tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return T.reshape(T.permute(x, (0, 2, 3, 1)), (b, h * w, c))


def _from_tokens(x: Tensor, h: int, w: int) -> Tensor:
    b, n, c = x.shape
    return T.permute(T.reshape(x, (b, h, w, c)), (0, 3, 1, 2))


class ConsistencyNet(Module):
    """Reference-image feature extractor: an architectural twin of the
    denoiser's encoder trunk with independent weights and no mask input,
    run on the clean reference at a fixed timestep embedding t_ref = 0."""

    T_REF = 0.0

    def __init__(self, cfg: UNetConfig, seed: int = 0):
        rng = make_rng(seed, 0xC5)
        self.cfg = cfg
        self.temb = TimestepEmbedding(rng, cfg.temb_width)
        self.trunk = _EncoderTrunk(rng, cfg)

    def encode(self, ref: Tensor) -> list[Tensor]:
        """Per-level token sequences [(B, (size/2^i)^2, ch_i), ...]."""
        if ref.ndim == 3:
            ref = T.reshape(ref, (1,) + ref.shape)
        b, c, h, w = ref.shape
        if c != self.cfg.channels or h != self.cfg.image_size or w != self.cfg.image_size:
            raise ValueError(f"expected (B, {self.cfg.channels}, {self.cfg.image_size}, "
                             f"{self.cfg.image_size}) reference, got {ref.shape}")
        temb = self.temb(np.full(b, self.T_REF))
        return [_to_tokens(f) for f in self.trunk(ref, temb)]


class DenoisingNet(Module):
    """Conditional noise predictor.

    denoise(x_t, t, txt, ip, ref) -> eps_hat with x_t's shape. `ref` is
    the per-level token stack from ConsistencyNet (or None), `txt`/`ip`
    are token tensors (or None). Attention sits in the middle block and
    at the configured decoder levels.
    """

    def __init__(self, cfg: UNetConfig, seed: int = 0):
        rng = make_rng(seed, 0xDE)
        self.cfg = cfg
        chs = cfg.level_channels
        top = chs[-1]
        self.temb = TimestepEmbedding(rng, cfg.temb_width)
        self.encoder = _EncoderTrunk(rng, cfg)
        self.mid_block1 = ResBlock(rng, top, top, cfg.temb_width)
        self.mid_attn = DecoupledAttentionBlock(rng, top, cfg.text_width,
                                                cfg.ip_width, cfg.ff_mult)
        self.mid_block2 = ResBlock(rng, top, top, cfg.temb_width)
        self.dec_blocks = []
        self.dec_attns = []
        self.ups = []
        self.up_biases = []
        for i in reversed(range(len(chs))):
            self.dec_blocks.append(ResBlock(rng, chs[i] * 2, chs[i], cfg.temb_width))
            if i in cfg.attn_levels:
                self.dec_attns.append(DecoupledAttentionBlock(
                    rng, chs[i], cfg.text_width, cfg.ip_width, cfg.ff_mult))
            else:
                self.dec_attns.append(None)
            if i > 0:
                self.ups.append(T.kaiming_conv(rng, chs[i - 1], chs[i], 3))
                self.up_biases.append(T.init_zeros((chs[i - 1],)))
        self.out_norm = ChannelNorm(chs[0])
        self.out_conv = T.init_zeros((cfg.channels, chs[0], 3, 3))
        self.out_bias = T.init_zeros((cfg.channels,))
        # learned stand-ins when conditioning is dropped (classifier-free)
        self.null_txt = T.init_normal(rng, (cfg.text_len, cfg.text_width))
        self.null_ip = T.init_normal(rng, (cfg.ip_tokens, cfg.ip_width))

    def encoder_parameter_count(self) -> int:
        """Parameters of the encoder half: trunk plus timestep embedding."""
        n = sum(p.size for p in self.encoder.named_parameters().values())
        return n + sum(p.size for p in self.temb.named_parameters().values())

    def denoise(self, x_t: Tensor, t, txt: Tensor | None, ip: Tensor | None,
                ref: list[Tensor] | None, lambda_self: float = 0.5,
                s_ip: float = 1.0) -> Tensor:
        cfg = self.cfg
        b, c, hh, ww = x_t.shape
        if c != cfg.channels or hh != cfg.image_size or ww != cfg.image_size:
            raise ValueError(f"x_t shape {x_t.shape} does not match config")
        if ref is not None and len(ref) != len(cfg.mults):
            raise ValueError(f"reference stack has {len(ref)} levels, "
                             f"need {len(cfg.mults)}")
        t_arr = np.full(b, t, dtype=np.float64) if np.isscalar(t) else np.asarray(t)
        temb = self.temb(t_arr)

        feats = self.encoder(x_t, temb)
        h = feats[-1]

        def run_attn(block, x, level):
            sz = x.shape[2]
            tok = _to_tokens(x)
            r = ref[level] if ref is not None else None
            tok = block(tok, r, txt, ip, lambda_self, s_ip)
            return _from_tokens(tok, sz, sz)

        top = len(cfg.mults) - 1
        h = self.mid_block1(h, temb)
        h = run_attn(self.mid_attn, h, top)
        h = self.mid_block2(h, temb)

        for j, i in enumerate(reversed(range(len(cfg.mults)))):
            h = T.concatenate([h, feats[i]], axis=1)
            h = self.dec_blocks[j](h, temb)
            if self.dec_attns[j] is not None:
                h = run_attn(self.dec_attns[j], h, i)
            if i > 0:
                h = T.upsample_nearest(h, 2)
                h = T.conv2d(h, self.ups[j], self.up_biases[j], padding=1)

        h = T.silu(self.out_norm(h))
        return T.conv2d(h, self.out_conv, self.out_bias, padding=1)

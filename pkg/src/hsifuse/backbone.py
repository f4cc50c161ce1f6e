"""Per-modality encoder over fused noisy stacks.

A 1x1 stem lifts the concatenated noise-step channels to ``width``, a stack of
residual blocks (3x3 conv -> gated activation -> learnable frequency filter ->
3x3 conv) refines them, and token self-attention over the patch grid is added
as a residual after the last block. The block-1 output is the shallow tap, the
post-attention output the deep tap; both are patch-shaped, so downstream
fusion can combine them elementwise.

The frequency filter multiplies the spatial spectrum by learned complex
weights stored over floor(W/2)+1 columns; the full field is rebuilt with
Hermitian symmetry so the filtered output is real by construction. Filter
arithmetic runs in float64 regardless of activation dtype, keeping the
imaginary residue far below the asserted 1e-6.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffusion import FusedStack
from .tensor import (
    ComplexTensor,
    Module,
    Param,
    ShapeError,
    Tensor,
    as_tensor,
    cast,
    concat,
    conv2d_1x1,
    conv2d_3x3,
    matmul,
    silu,
    softmax_lastdim,
    spectral_filter,
    take_axis,
)


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int
    width: int = 64
    depth: int = 4
    heads: int = 4
    patch: int = 7
    use_freq_filter: bool = True

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2 for distinct shallow/deep taps, got {self.depth}")


@dataclass
class EncoderFeatures:
    shallow: Tensor  # [B, P, P, width] block-1 output
    deep: Tensor     # [B, P, P, width] post-attention output


def _he(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)


class Conv1x1(Module):
    def __init__(self, name, cin, cout, rng=None, dtype=np.float32, zero_init=False):
        if zero_init or rng is None:
            w = np.zeros((cin, cout))
        else:
            w = _he(rng, (cin, cout), cin)
        self.w = Param(f"{name}.w", w, dtype=dtype)
        self.b = Param(f"{name}.b", np.zeros(cout), dtype=dtype)

    def __call__(self, x):
        return conv2d_1x1(x, self.w, self.b)


class Conv3x3(Module):
    def __init__(self, name, cin, cout, rng=None, dtype=np.float32, zero_init=False):
        if zero_init or rng is None:
            w = np.zeros((3, 3, cin, cout))
        else:
            w = _he(rng, (3, 3, cin, cout), 9 * cin)
        self.w = Param(f"{name}.w", w, dtype=dtype)
        self.b = Param(f"{name}.b", np.zeros(cout), dtype=dtype)

    def __call__(self, x):
        return conv2d_3x3(x, self.w, self.b)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def qkv_project(f: Tensor, wq, wk, wv) -> tuple[Tensor, Tensor, Tensor]:
    """Project token features [.., N, c] into queries, keys and values."""
    return matmul(f, wq), matmul(f, wk), matmul(f, wv)


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, w_out) -> Tensor:
    """Scaled dot-product attention with per-head split and output projection.

    Inputs are [.., N, c]; each of the ``heads`` slices of size c/heads runs
    softmax(q k^T / sqrt(c/heads)) v independently; the concatenated heads go
    through the [c, c] projection.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    single = q.ndim == 2
    if single:
        q, k, v = (t.reshape(1, *t.shape) for t in (q, k, v))
    b, n, c = q.shape
    if c % heads != 0:
        raise ShapeError(f"feature dim {c} not divisible by {heads} heads")
    d = c // heads

    def split(t):
        return t.reshape(b, n, heads, d).transpose(0, 2, 1, 3)  # [B, h, N, d]

    qh, kh, vh = split(q), split(k), split(v)
    scores = matmul(qh, kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d))
    weights = softmax_lastdim(scores)
    ctx = matmul(weights, vh)                                   # [B, h, N, d]
    merged = ctx.transpose(0, 2, 1, 3).reshape(b, n, c)
    out = matmul(merged, w_out)
    return out.reshape(n, c) if single else out


class AttentionBlock(Module):
    def __init__(self, name, width, heads, rng, dtype=np.float32):
        scale = 1.0 / math.sqrt(width)
        self.heads = heads
        self.wq = Param(f"{name}.wq", rng.normal(0, scale, (width, width)), dtype=dtype)
        self.wk = Param(f"{name}.wk", rng.normal(0, scale, (width, width)), dtype=dtype)
        self.wv = Param(f"{name}.wv", rng.normal(0, scale, (width, width)), dtype=dtype)
        self.wo = Param(f"{name}.wo", rng.normal(0, scale, (width, width)), dtype=dtype)

    def __call__(self, tokens: Tensor) -> Tensor:
        q, k, v = qkv_project(tokens, self.wq, self.wk, self.wv)
        return multihead_attention(q, k, v, self.heads, self.wo)


# ---------------------------------------------------------------------------
# learnable frequency filter
# ---------------------------------------------------------------------------


class FreqFilter(Module):
    """Complex spectral weights over [H, floor(W/2)+1, C], identity at init."""

    def __init__(self, name, h, w, channels, dtype=np.float32):
        self.h, self.w, self.channels = h, w, channels
        wr = w // 2 + 1
        self.wr = Param(f"{name}.re", np.ones((h, wr, channels)), dtype=dtype)
        self.wi = Param(f"{name}.im", np.zeros((h, wr, channels)), dtype=dtype)

    def full_field(self, dtype) -> ComplexTensor:
        """Rebuild the full [H, W, C] weight field with exact Hermitian symmetry."""
        h, w = self.h, self.w
        wr_stored = w // 2 + 1
        rowflip = np.array([0] + list(range(h - 1, 0, -1)))
        self_cols = {0} | ({w // 2} if w % 2 == 0 and w > 1 else set())
        re64, im64 = cast(self.wr, dtype), cast(self.wi, dtype)
        cols_re, cols_im = [], []
        for v in range(w):
            if v < wr_stored:
                col_re = take_axis(re64, [v], 1)
                col_im = take_axis(im64, [v], 1)
                if v in self_cols:
                    col_re = (col_re + take_axis(col_re, rowflip, 0)) * 0.5
                    col_im = (col_im - take_axis(col_im, rowflip, 0)) * 0.5
            else:
                src = w - v
                col_re = take_axis(take_axis(re64, [src], 1), rowflip, 0)
                col_im = -take_axis(take_axis(im64, [src], 1), rowflip, 0)
            cols_re.append(col_re)
            cols_im.append(col_im)
        return ComplexTensor(concat(cols_re, axis=1), concat(cols_im, axis=1))


def freq_parse(x: Tensor, filt: FreqFilter) -> Tensor:
    """Filter ``x`` [..,H,W,C] in the frequency domain; identity weights are a no-op.

    The Hermitian expansion stays in small per-bin ops; the batched transform
    itself runs through the fused spectral_filter node (float64 arithmetic,
    output reality asserted at 1e-6).
    """
    x = as_tensor(x)
    if x.shape[-3] != filt.h or x.shape[-2] != filt.w or x.shape[-1] != filt.channels:
        raise ShapeError(f"input {x.shape} does not match filter ({filt.h}, {filt.w}, {filt.channels})")
    weights = filt.full_field(x.dtype)
    return spectral_filter(x, weights.real, weights.imag, assert_real_tol=1e-6)


# ---------------------------------------------------------------------------
# residual blocks and the encoder
# ---------------------------------------------------------------------------


class ResidualBlock(Module):
    """x + g(x) with g = conv3x3 -> silu -> frequency filter -> conv3x3."""

    def __init__(self, name, width, patch, rng, dtype=np.float32, use_freq_filter=True):
        self.conv1 = Conv3x3(f"{name}.conv1", width, width, rng, dtype)
        self.filt = FreqFilter(f"{name}.freq", patch, patch, width, dtype) if use_freq_filter else None
        self.conv2 = Conv3x3(f"{name}.conv2", width, width, rng, dtype)

    def residual(self, x: Tensor) -> Tensor:
        g = silu(self.conv1(x))
        if self.filt is not None:
            g = freq_parse(g, self.filt)
        return self.conv2(g)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.residual(x)


class Encoder(Module):
    """Stem + residual blocks + token attention; exposes shallow and deep taps."""

    def __init__(self, name, config: EncoderConfig, rng, dtype=np.float32):
        self.config = config
        self.stem = Conv1x1(f"{name}.stem", config.in_channels, config.width, rng, dtype)
        self.blocks = [
            ResidualBlock(f"{name}.block{i}", config.width, config.patch, rng, dtype, config.use_freq_filter)
            for i in range(config.depth)
        ]
        self.attn = AttentionBlock(f"{name}.attn", config.width, config.heads, rng, dtype)

    def __call__(self, x) -> EncoderFeatures:
        x = as_tensor(x)
        if isinstance(x, Tensor) and x.shape[-1] != self.config.in_channels:
            raise ShapeError(f"input channels {x.shape[-1]} != configured {self.config.in_channels}")
        single = x.ndim == 3
        if single:
            x = x.reshape(1, *x.shape)
        h = self.stem(x)
        shallow = None
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i == 0:
                shallow = h
        b, p, _, c = h.shape
        tokens = h.reshape(b, p * p, c)
        deep = h + self.attn(tokens).reshape(b, p, p, c)
        if single:
            shallow, deep = shallow.reshape(*shallow.shape[1:]), deep.reshape(*deep.shape[1:])
        return EncoderFeatures(shallow=shallow, deep=deep)


class DecodeHead(Module):
    """1x1 projection from width back to the reconstruction target channels."""

    def __init__(self, name, width, out_channels, rng=None, dtype=np.float32, zero_init=True):
        self.proj = Conv1x1(f"{name}.proj", width, out_channels, rng, dtype, zero_init=zero_init)

    def __call__(self, deep: Tensor) -> Tensor:
        return self.proj(deep)


def encode(fused, encoder: Encoder) -> EncoderFeatures:
    """Run the encoder over a FusedStack (or raw array/Tensor)."""
    if isinstance(fused, FusedStack):
        fused = fused.data
    return encoder(as_tensor(fused))

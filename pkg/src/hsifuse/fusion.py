"""Gated feature reuse, cross-modality fusion, classifier head and hard maps.

Feature reuse combines a shallow and a deep feature map of identical shape:

    deep'  = sigmoid(F_d(low)) * F_b(deep) + F_b(low)
    low'   = sigmoid(F_l(low)) * F_b(deep) + F_b(low)
    fused  = low' + deep'

F_b is a plain 1x1 channel map shared by both equations; F_d and F_l are
offset-sampled 1x1 maps (a zero-initialized auxiliary conv predicts a per-pixel
(dy, dx) displacement, the input is read there bilinearly with mirror
boundary, then a channel map applies). The same reuse operator fuses the two
modality results, and a two-layer MLP turns the fused patch into class
probabilities.
"""

from __future__ import annotations

import math

import numpy as np

from .backbone import Conv1x1, EncoderFeatures
from .tensor import (
    Module,
    Param,
    ShapeError,
    Tensor,
    as_tensor,
    bilinear_sample,
    conv2d_1x1,
    matmul,
    sigmoid,
    silu,
    softmax_lastdim,
)


class OffsetConv1x1(Module):
    """1x1 conv over bilinearly displaced inputs; zero offsets reduce it to conv2d_1x1."""

    def __init__(self, name, channels, rng=None, dtype=np.float32):
        # offset predictor starts at zero so training begins from plain sampling
        self.offset = Conv1x1(f"{name}.offset", channels, 2, dtype=dtype, zero_init=True)
        self.mix = Conv1x1(f"{name}.mix", channels, channels, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        offsets = self.offset(x)
        return self.mix(bilinear_sample(x, offsets))


def offset_conv1x1(x, params: OffsetConv1x1) -> Tensor:
    return params(as_tensor(x))


class FrmParams(Module):
    """One feature-reuse unit: shared bottleneck F_b plus the two gates F_d, F_l."""

    def __init__(self, name, channels, rng=None, dtype=np.float32):
        self.fb = Conv1x1(f"{name}.fb", channels, channels, rng, dtype)
        self.fd = OffsetConv1x1(f"{name}.fd", channels, rng, dtype)
        self.fl = OffsetConv1x1(f"{name}.fl", channels, rng, dtype)


def frm_fuse(x_low, x_deep, params: FrmParams) -> Tensor:
    """Gated combination of shallow and deep features (same shape in, same out)."""
    x_low, x_deep = as_tensor(x_low), as_tensor(x_deep)
    if x_low.shape != x_deep.shape:
        raise ShapeError(f"shallow {x_low.shape} != deep {x_deep.shape}")
    fb_low = params.fb(x_low)
    fb_deep = params.fb(x_deep)
    deep_mod = sigmoid(params.fd(x_low)) * fb_deep + fb_low
    low_mod = sigmoid(params.fl(x_low)) * fb_deep + fb_low
    return low_mod + deep_mod


def fuse_modalities(
    feat1: EncoderFeatures,
    feat2: EncoderFeatures,
    frm1: FrmParams,
    frm2: FrmParams,
    frm_cross: FrmParams,
) -> Tensor:
    """Per-modality reuse, then a third reuse unit across the two results."""
    r1 = frm_fuse(feat1.shallow, feat1.deep, frm1)
    r2 = frm_fuse(feat2.shallow, feat2.deep, frm2)
    return frm_fuse(r1, r2, frm_cross)


class ClassifierHead(Module):
    """Flatten -> hidden -> K logits, with the decision threshold for map export."""

    def __init__(self, name, width, patch, num_classes, hidden=128, rng=None, dtype=np.float32, tau=0.5):
        if not 0.0 < tau < 1.0:
            raise ValueError(f"tau must be in (0,1), got {tau}")
        in_dim = width * patch * patch
        self.patch = patch
        self.width = width
        self.tau = tau
        if rng is None:
            w1 = np.zeros((in_dim, hidden))
            w2 = np.zeros((hidden, num_classes))
        else:
            w1 = rng.normal(0, math.sqrt(2.0 / in_dim), (in_dim, hidden))
            w2 = rng.normal(0, math.sqrt(2.0 / hidden), (hidden, num_classes))
        self.w1 = Param(f"{name}.w1", w1, dtype=dtype)
        self.b1 = Param(f"{name}.b1", np.zeros(hidden), dtype=dtype)
        self.w2 = Param(f"{name}.w2", w2, dtype=dtype)
        self.b2 = Param(f"{name}.b2", np.zeros(num_classes), dtype=dtype)

    def logits(self, fused: Tensor) -> Tensor:
        fused = as_tensor(fused)
        single = fused.ndim == 3
        if single:
            fused = fused.reshape(1, *fused.shape)
        b = fused.shape[0]
        flat = fused.reshape(b, self.width * self.patch * self.patch)
        hidden = silu(matmul(flat, self.w1) + self.b1)
        out = matmul(hidden, self.w2) + self.b2
        return out.reshape(out.shape[1]) if single else out


def classify(fused: Tensor, head: ClassifierHead) -> Tensor:
    """Class probabilities (softmax over logits); rows sum to 1."""
    logits = head.logits(fused)
    return softmax_lastdim(logits)


def hard_map(probs_per_pixel: np.ndarray, tau: float) -> np.ndarray:
    """Per-class binary maps [K,H,W]: 1 where the class probability meets tau."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0,1), got {tau}")
    probs = np.asarray(probs_per_pixel)
    if probs.ndim != 3:
        raise ShapeError(f"expected [H,W,K] probabilities, got {probs.shape}")
    return (np.moveaxis(probs, -1, 0) >= tau).astype(np.uint8)

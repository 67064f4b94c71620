"""Channel attention: squeeze-and-excitation, CBAM's channel module and GCA.

All blocks act on features shaped (..., T, C, H, W) and return the rescaled
features together with the per-frame channel weights (..., T, C). Attention
is computed frame by frame; GCA additionally couples frames through a
temporal mean of the gate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Parameter, Tensor, ops
from .errors import ConfigError, ShapeError

KINDS = ("none", "se", "cbam", "gca")


def _hidden(channels: int, reduction: int) -> int:
    if reduction < 1 or channels // reduction < 1:
        raise ConfigError(
            f"reduction ratio {reduction} leaves no hidden units for {channels} channels"
        )
    return channels // reduction


def _bottleneck_weights(prefix, channels, reduction, rng, dtype):
    hidden = _hidden(channels, reduction)
    w1 = rng.standard_normal((hidden, channels)) * np.sqrt(2.0 / channels)
    w2 = rng.standard_normal((channels, hidden)) * 0.01
    return (
        Parameter.of(f"{prefix}.w1", w1.astype(dtype)),
        Parameter.of(f"{prefix}.w2", w2.astype(dtype)),
    )


def _excite(z, w1: Parameter, w2: Parameter):
    """sigma(W2 relu(W1 z)) applied along the last axis."""
    return ops.sigmoid(ops.linear(ops.relu(ops.linear(z, w1.tensor)), w2.tensor))


def _check_features(kind, x: Tensor, channels: int):
    if x.ndim < 3 or x.shape[-3] != channels:
        raise ShapeError(kind, x.shape, (channels,), detail="channel count")
    if x.shape[-1] * x.shape[-2] == 0:
        raise ShapeError(kind, x.shape, detail="empty spatial feature map")


@dataclass
class SEBlock:
    w1: Parameter
    w2: Parameter
    reduction: int

    @classmethod
    def create(cls, channels, reduction, rng=None, dtype=np.float64, prefix="se"):
        rng = rng if rng is not None else np.random.default_rng(0)
        w1, w2 = _bottleneck_weights(prefix, channels, reduction, rng, dtype)
        return cls(w1, w2, reduction)

    @property
    def channels(self):
        return self.w1.shape[1]

    def parameters(self):
        return [self.w1, self.w2]


@dataclass
class CBAMChannelBlock:
    w1: Parameter
    w2: Parameter
    reduction: int

    @classmethod
    def create(cls, channels, reduction, rng=None, dtype=np.float64, prefix="cbam"):
        rng = rng if rng is not None else np.random.default_rng(0)
        w1, w2 = _bottleneck_weights(prefix, channels, reduction, rng, dtype)
        return cls(w1, w2, reduction)

    @property
    def channels(self):
        return self.w1.shape[1]

    def parameters(self):
        return [self.w1, self.w2]


@dataclass
class GCABlock:
    """GCA parameters. ``kernel`` holds one H x W global kernel per channel."""

    w1: Parameter
    w2: Parameter
    kernel: Parameter
    reduction: int

    @classmethod
    def create(
        cls,
        channels,
        height,
        width,
        reduction,
        rng=None,
        dtype=np.float64,
        prefix="gca",
        kernel_noise=0.01,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        w1, w2 = _bottleneck_weights(prefix, channels, reduction, rng, dtype)
        kernel = np.full((channels, height, width), 1.0 / (height * width))
        if kernel_noise:
            kernel = kernel + rng.normal(0.0, kernel_noise, kernel.shape)
        return cls(w1, w2, Parameter.of(f"{prefix}.kernel", kernel.astype(dtype)), reduction)

    @property
    def channels(self):
        return self.w1.shape[1]

    def parameters(self):
        return [self.w1, self.w2, self.kernel]

    def set_identity(self):
        """Uniform averaging kernel and zero bottleneck: the block becomes X -> X."""
        c, h, w = self.kernel.shape
        self.kernel.data[...] = 1.0 / (h * w)
        self.w1.data[...] = 0
        self.w2.data[...] = 0


def se_attention(x: Tensor, block: SEBlock):
    _check_features("se_attention", x, block.channels)
    z = ops.mean(x, axis=(-2, -1))
    s = _excite(z, block.w1, block.w2)
    return ops.scale_channels(s, x), s


def cbam_channel_attention(x: Tensor, block: CBAMChannelBlock):
    _check_features("cbam_channel_attention", x, block.channels)
    flat = ops.reshape(x, x.shape[:-2] + (-1,))
    avg = ops.mean(flat, axis=-1)
    mx, _ = ops.max_last(flat)

    def mlp(z):
        return ops.linear(ops.relu(ops.linear(z, block.w1.tensor)), block.w2.tensor)

    s = ops.sigmoid(ops.add(mlp(avg), mlp(mx)))
    return ops.scale_channels(s, x), s


def gca_descriptor(x: Tensor, block: GCABlock) -> Tensor:
    """Per-channel global convolution: sum_ij X_c(i, j) * K_c(i, j)."""
    if x.ndim < 4 or x.shape[-3:] != block.kernel.shape:
        raise ShapeError("gca_attention", x.shape, block.kernel.shape)
    return ops.spatial_weighted_sum(x, block.kernel.tensor)


def gca_attention(x: Tensor, block: GCABlock):
    """Returns (rescaled features, weights in (0, 2)).

    The gate s is computed per frame; the final weight is twice the geometric
    mean of s and its temporal average, 2 * sqrt(s * mean_T(s)).
    """
    _check_features("gca_attention", x, block.channels)
    z = gca_descriptor(x, block)
    s = _excite(z, block.w1, block.w2)
    s_bar = ops.mean(s, axis=-2, keepdims=True)
    weights = ops.scale(ops.sqrt(ops.mul(s, s_bar)), 2.0)
    return ops.scale_channels(weights, x), weights


def make_block(kind, channels, height, width, reduction, rng, dtype, prefix):
    if kind == "none":
        return None
    if kind == "se":
        return SEBlock.create(channels, reduction, rng, dtype, prefix)
    if kind == "cbam":
        return CBAMChannelBlock.create(channels, reduction, rng, dtype, prefix)
    if kind == "gca":
        return GCABlock.create(channels, height, width, reduction, rng, dtype, prefix)
    raise ConfigError(f"unknown attention kind {kind!r}; expected one of {KINDS}")


def apply_block(x: Tensor, block: Optional[object]):
    if block is None:
        return x, None
    if isinstance(block, GCABlock):
        return gca_attention(x, block)
    if isinstance(block, CBAMChannelBlock):
        return cbam_channel_attention(x, block)
    return se_attention(x, block)

"""Residual building blocks of the restoration trunk.

A BasicBlock is two zero-gated residual branches: a depth-wise
channel-attention branch (point-wise conv, depth-wise conv, GELU, channel
attention, point-wise conv) and a point-wise feed-forward branch, each
preceded by channel LayerNorm. Both gates start at zero, so a freshly
built block (and any stack of them) is exactly the identity map.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import ChannelLayerNorm, ChannelScale, Conv2d, Module


class ChannelAttention(Module):
    """Squeeze-excitation gate: pool, reduce, GELU, expand, sigmoid, rescale."""

    def __init__(self, channels, reduction=2, rng=None, dtype=np.float32):
        if channels % reduction:
            raise ConfigError(
                f"channel attention: {channels} channels not divisible by "
                f"reduction={reduction}")
        hidden = channels // reduction
        self.reduce = Conv2d(channels, hidden, 1, rng=rng, dtype=dtype)
        self.expand = Conv2d(hidden, channels, 1, rng=rng, dtype=dtype)

    def forward(self, x):
        gate = T.sigmoid(self.expand(T.gelu(self.reduce(T.global_avg_pool(x)))))
        return T.mul(x, gate)


class Dcam(Module):
    """Depth-wise channel-attention branch; preserves channel count."""

    def __init__(self, channels, ca_reduction=2, rng=None, dtype=np.float32):
        self.pw_in = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.dw = Conv2d(channels, channels, 3, groups=channels, rng=rng,
                         dtype=dtype)
        self.ca = ChannelAttention(channels, reduction=ca_reduction, rng=rng,
                                   dtype=dtype)
        self.pw_out = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.pw_out(self.ca(T.gelu(self.dw(self.pw_in(x)))))


class Ffn(Module):
    """Point-wise expansion MLP: C -> e*C -> C with GELU in between."""

    def __init__(self, channels, expansion=2, rng=None, dtype=np.float32):
        self.pw1 = Conv2d(channels, channels * expansion, 1, rng=rng, dtype=dtype)
        self.pw2 = Conv2d(channels * expansion, channels, 1, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.pw2(T.gelu(self.pw1(x)))


class BasicBlock(Module):
    """F = alpha*DCAM(LN(x)) + x; out = beta*FFN(LN(F)) + F.

    alpha and beta are per-channel scales initialized to zero, making the
    block the identity at initialization.
    """

    def __init__(self, channels, ffn_expansion=2, ca_reduction=2, rng=None,
                 dtype=np.float32):
        self.ln1 = ChannelLayerNorm(channels, dtype=dtype)
        self.dcam = Dcam(channels, ca_reduction=ca_reduction, rng=rng, dtype=dtype)
        self.alpha = ChannelScale(channels, dtype=dtype)
        self.ln2 = ChannelLayerNorm(channels, dtype=dtype)
        self.ffn = Ffn(channels, expansion=ffn_expansion, rng=rng, dtype=dtype)
        self.beta = ChannelScale(channels, dtype=dtype)

    def forward(self, x):
        f = T.add(self.alpha(self.dcam(self.ln1(x))), x)
        return T.add(self.beta(self.ffn(self.ln2(f))), f)


class Resample(Module):
    """One U-net level's resampling pair.

    down: 2x2 stride-2 conv, C -> 2C at half resolution.
    up:   point-wise conv 2C -> 4C then pixel shuffle, back to C at double
          resolution, so `up(down(.))`-shaped paths keep widths aligned.
    """

    def __init__(self, channels, rng=None, dtype=np.float32):
        self.down_conv = Conv2d(channels, 2 * channels, 2, stride=2, padding=0,
                                rng=rng, dtype=dtype)
        self.up_conv = Conv2d(2 * channels, 4 * channels, 1, rng=rng, dtype=dtype)

    def down(self, x):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(
                f"downsample needs even spatial dims, got {x.shape}; pad inputs "
                f"to multiples of 2^levels first")
        return self.down_conv(x)

    def up(self, x):
        if x.shape[1] % 2:
            raise ShapeError(f"upsample needs an even channel count, got {x.shape}")
        return T.pixel_shuffle(self.up_conv(x), 2)

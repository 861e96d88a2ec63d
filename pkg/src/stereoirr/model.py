"""The stereo rain-removal network.

Three stages: a shared 3x3 head lifts both views (stacked along the batch
axis) to C channels; a U-net trunk of BasicBlocks with cross-view mutual
attention and five down/up resampling levels mixes long-range and
cross-view context; a zero-initialized 3x3 tail predicts per-view residuals
added back onto the inputs. The zero tail makes a freshly built model the
exact identity map, whatever the rest of the configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .blocks import BasicBlock, Resample
from .dma import DmaLayer
from .errors import ConfigError, ShapeError
from .nn import Conv2d, Module
from .rng import RngState

LOSS_MODES = ("per+ssim", "mse")


@dataclass
class ModelConfig:
    """Every architecture axis, including the ablation switches."""

    width: int = 30
    encoder_blocks: tuple = (3, 3, 3, 3, 3)
    middle_blocks: int = 1
    decoder_blocks: tuple = (3, 3, 3, 3, 3)
    use_dma: bool = True
    dma_every: int = 1
    multi_scale: bool = True
    ffn_expansion: int = 2
    ca_reduction: int = 2
    cross_value: bool = False
    loss_mode: str = "per+ssim"

    def __post_init__(self):
        self.encoder_blocks = tuple(int(b) for b in self.encoder_blocks)
        self.decoder_blocks = tuple(int(b) for b in self.decoder_blocks)
        if len(self.encoder_blocks) != len(self.decoder_blocks):
            raise ConfigError(
                f"encoder_blocks {self.encoder_blocks} and decoder_blocks "
                f"{self.decoder_blocks} must have the same number of stages")
        if self.width <= 0 or self.middle_blocks < 0:
            raise ConfigError("width must be positive, middle_blocks >= 0")
        if self.dma_every < 1:
            raise ConfigError("dma_every must be >= 1")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(
                f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")

    @property
    def levels(self):
        """Number of resampling levels; inputs must be multiples of 2**levels."""
        return len(self.encoder_blocks) if self.multi_scale else 0

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config key(s): {unknown}")
        return cls(**d)


class _Stage(Module):
    """A run of BasicBlocks, optionally interleaved with per-slot DMA layers."""

    def __init__(self, channels, n_blocks, cfg: ModelConfig, rng, dtype):
        self.blocks = [
            BasicBlock(channels, ffn_expansion=cfg.ffn_expansion,
                       ca_reduction=cfg.ca_reduction, rng=rng, dtype=dtype)
            for _ in range(n_blocks)
        ]
        self.dmas = []
        if cfg.use_dma:
            for j in range(n_blocks):
                if (j + 1) % cfg.dma_every == 0:
                    self.dmas.append(
                        DmaLayer(channels, cross_value=cfg.cross_value,
                                 rng=rng, dtype=dtype))
                else:
                    self.dmas.append(None)

    def forward(self, x, views):
        # views = batch entries per view; x stacks [left; right] along axis 0
        for j, block in enumerate(self.blocks):
            x = block(x)
            if self.dmas and self.dmas[j] is not None:
                f_l = T.narrow(x, 0, 0, views)
                f_r = T.narrow(x, 0, views, views)
                f_l, f_r = self.dmas[j](f_l, f_r)
                x = T.concat((f_l, f_r), axis=0)
        return x

    def named_parameters(self, prefix=""):
        for j, block in enumerate(self.blocks):
            yield from block.named_parameters(prefix=f"{prefix}blocks.{j}.")
        for j, dma in enumerate(self.dmas):
            if dma is not None:
                yield from dma.named_parameters(prefix=f"{prefix}dmas.{j}.")

    def iter_dma(self):
        for dma in self.dmas:
            if dma is not None:
                yield dma


class StereoIrrModel(Module):
    """Assembled network; `forward(x_l, x_r)` returns the derained pair."""

    def __init__(self, config: ModelConfig, rng=None, dtype=np.float32):
        if rng is None:
            rng = RngState(0).split("init")
        self.config = config
        c = config.width
        n = len(config.encoder_blocks)

        self.head = Conv2d(3, c, 3, rng=rng, dtype=dtype)
        widths = [c * (2 ** i) if config.multi_scale else c for i in range(n + 1)]

        self.encoder = [
            _Stage(widths[i], config.encoder_blocks[i], config, rng, dtype)
            for i in range(n)
        ]
        self.resamples = (
            [Resample(widths[i], rng=rng, dtype=dtype) for i in range(n)]
            if config.multi_scale else []
        )
        self.middle = _Stage(widths[n], config.middle_blocks, config, rng, dtype)
        self.decoder = [
            _Stage(widths[n - 1 - j], config.decoder_blocks[j], config, rng, dtype)
            for j in range(n)
        ]
        self.tail = Conv2d(widths[0], 3, 3, zero_init=True, dtype=dtype)

    # -- the three pipeline steps ----------------------------------------
    def feature_extraction(self, x_l, x_r):
        """Shared head conv on both views, stacked along the batch axis."""
        if x_l.shape != x_r.shape:
            raise ShapeError(
                f"left {x_l.shape} and right {x_r.shape} views must match")
        if x_l.ndim != 4 or x_l.shape[1] != 3:
            raise ShapeError(f"expected [B,3,H,W] images, got {x_l.shape}")
        m = 2 ** self.config.levels
        if x_l.shape[2] % m or x_l.shape[3] % m:
            raise ShapeError(
                f"spatial dims {x_l.shape[2]}x{x_l.shape[3]} must be multiples "
                f"of {m}; reflect-pad inputs (pad_reflect) before inference")
        stacked = T.concat((x_l, x_r), axis=0)
        return self.head(stacked)

    def lci(self, f0, views):
        """U-net trunk: encoder (+down), middle, decoder (up + skip add)."""
        n = len(self.encoder)
        x = f0
        skips = []
        for i in range(n):
            x = self.encoder[i](x, views)
            skips.append(x)
            if self.config.multi_scale:
                x = self.resamples[i].down(x)
        x = self.middle(x, views)
        for j in range(n):
            if self.config.multi_scale:
                x = self.resamples[n - 1 - j].up(x)
            x = T.add(x, skips[n - 1 - j])
            x = self.decoder[j](x, views)
        return x

    def residual_prediction(self, fd, x_l, x_r):
        """Tail conv to per-view residuals, added onto the rainy inputs.

        No clamping here; clamp only when exporting images."""
        views = x_l.shape[0]
        res = self.tail(fd)
        res_l = T.narrow(res, 0, 0, views)
        res_r = T.narrow(res, 0, views, views)
        return T.add(x_l, res_l), T.add(x_r, res_r)

    def forward(self, x_l, x_r):
        f0 = self.feature_extraction(x_l, x_r)
        fd = self.lci(f0, views=x_l.shape[0])
        return self.residual_prediction(fd, x_l, x_r)

    def named_parameters(self, prefix=""):
        yield from self.head.named_parameters(prefix=f"{prefix}head.")
        for i, stage in enumerate(self.encoder):
            yield from stage.named_parameters(prefix=f"{prefix}encoder.{i}.")
        for i, rs in enumerate(self.resamples):
            yield from rs.named_parameters(prefix=f"{prefix}resamples.{i}.")
        yield from self.middle.named_parameters(prefix=f"{prefix}middle.")
        for j, stage in enumerate(self.decoder):
            yield from stage.named_parameters(prefix=f"{prefix}decoder.{j}.")
        yield from self.tail.named_parameters(prefix=f"{prefix}tail.")

    def iter_dma_layers(self):
        for stage in (*self.encoder, self.middle, *self.decoder):
            yield from stage.iter_dma()


def pad_reflect(images: np.ndarray, levels: int):
    """Reflect-pad H,W up to multiples of 2**levels.

    Returns (padded, crop_spec); `crop(padded_like, crop_spec)` restores the
    original size. Works on [..., H, W] arrays; padding larger than the
    input is handled by repeated reflection.
    """
    if levels < 0:
        raise ConfigError("levels must be >= 0")
    m = 2 ** levels
    h, w = images.shape[-2], images.shape[-1]
    ph = (-h) % m
    pw = (-w) % m
    crop_spec = (h, w)
    out = images
    for axis, pad in ((-2, ph), (-1, pw)):
        while pad > 0:
            step = min(pad, out.shape[axis] - 1)
            if step <= 0:
                raise ShapeError("input too small to reflect-pad")
            spec = [(0, 0)] * out.ndim
            spec[axis] = (0, step)
            out = np.pad(out, spec, mode="reflect")
            pad -= step
    return out, crop_spec


def crop_to(images: np.ndarray, crop_spec):
    h, w = crop_spec
    return images[..., :h, :w]


def count_parameters(config: ModelConfig) -> int:
    """Parameter count as a pure function of the configuration."""
    return StereoIrrModel(config, rng=RngState(0).split("init")).parameter_count()

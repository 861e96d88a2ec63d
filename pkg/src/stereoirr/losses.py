"""Training losses and image-quality metrics.

The training objective is a weighted sum of a perceptual feature distance
and negative SSIM (an MSE-only mode covers the corresponding ablation).
Evaluation metrics (PSNR/SSIM) run on the luma channel, matching the
standard evaluation convention for deraining benchmarks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Conv2d, Module
from .rng import RngState
from .tensor import Tensor

PERCEPTUAL_SEED = 0x5EED


def gaussian_window(size=11, sigma=1.5, dtype=np.float64):
    """Normalized 2-D Gaussian window (sums to 1), centered on (size-1)/2."""
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    g /= g.sum()
    win = np.outer(g, g)
    return (win / win.sum()).astype(dtype)


@dataclass
class SsimParams:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0


def ssim(x, y, params: SsimParams | None = None):
    """Mean local SSIM over valid windows; differentiable, in [-1, 1].

    Inputs are [B,C,H,W] tensors with values in [0,1]; each channel is
    treated independently (grouped convolution with the Gaussian window).
    """
    params = params or SsimParams()
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if not isinstance(y, Tensor):
        y = Tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"ssim: shapes differ, {x.shape} vs {y.shape}")
    if x.ndim == 3:
        x = T.reshape(x, (1, *x.shape))
        y = T.reshape(y, (1, *y.shape))
    c = x.shape[1]
    win = gaussian_window(params.window_size, params.sigma, dtype=x.dtype)
    kernel = Tensor(np.broadcast_to(win, (c, 1, *win.shape)).copy())

    def blur(t):
        return T.conv2d(t, kernel, stride=1, padding=0, groups=c)

    c1 = (params.k1 * params.dynamic_range) ** 2
    c2 = (params.k2 * params.dynamic_range) ** 2
    mu_x = blur(x)
    mu_y = blur(y)
    mu_xx = T.mul(mu_x, mu_x)
    mu_yy = T.mul(mu_y, mu_y)
    mu_xy = T.mul(mu_x, mu_y)
    sig_xx = T.sub(blur(T.mul(x, x)), mu_xx)
    sig_yy = T.sub(blur(T.mul(y, y)), mu_yy)
    sig_xy = T.sub(blur(T.mul(x, y)), mu_xy)
    num = T.mul(T.add(T.mul(mu_xy, 2.0), c1), T.add(T.mul(sig_xy, 2.0), c2))
    den = T.mul(T.add(T.add(mu_xx, mu_yy), c1),
                T.add(T.add(sig_xx, sig_yy), c2))
    return T.mean_all(T.div(num, den))


class PerceptualExtractor(Module):
    """Fixed random convolutional pyramid for the perceptual loss.

    Two frozen stages of 3x3 convs with GELU, downsampling once per stage,
    giving features at half and quarter resolution. The weights come from a
    fixed seed (identical seed, identical features) and never train;
    gradients still flow to the *images* being compared. `load` swaps in
    externally supplied weights from a checkpoint-format file.
    """

    def __init__(self, seed=PERCEPTUAL_SEED, channels=(16, 32), dtype=np.float32):
        rng = RngState(seed).split("perceptual")
        c1, c2 = channels
        self.stage1 = [
            Conv2d(3, c1, 3, rng=rng, dtype=dtype),
            Conv2d(c1, c1, 3, stride=2, rng=rng, dtype=dtype),
        ]
        self.stage2 = [
            Conv2d(c1, c2, 3, rng=rng, dtype=dtype),
            Conv2d(c2, c2, 3, stride=2, rng=rng, dtype=dtype),
        ]
        for p in self.parameters():
            p.requires_grad = False

    def forward(self, x):
        h = x
        for conv in self.stage1:
            h = T.gelu(conv(h))
        f1 = h
        for conv in self.stage2:
            h = T.gelu(conv(h))
        return f1, h

    def load(self, path):
        from .training import load_checkpoint_tensors

        tensors = load_checkpoint_tensors(path)
        self.load_state_dict(tensors)
        for p in self.parameters():
            p.requires_grad = False


def perceptual_loss(pred_l, pred_r, gt_l, gt_r, extractor: PerceptualExtractor):
    """Half the summed mean-squared feature distances, both stages and views."""
    pred = T.concat((pred_l, pred_r), axis=0)
    gt = T.concat((gt_l, gt_r), axis=0)
    p1, p2 = extractor(pred)
    g1, g2 = extractor(gt)
    d1 = T.sub(p1, g1)
    d2 = T.sub(p2, g2)
    return T.mul(T.add(T.mean_all(T.mul(d1, d1)), T.mean_all(T.mul(d2, d2))), 0.5)


def mse_loss(pred_l, pred_r, gt_l, gt_r):
    dl = T.sub(pred_l, gt_l)
    dr = T.sub(pred_r, gt_r)
    return T.mul(T.add(T.mean_all(T.mul(dl, dl)), T.mean_all(T.mul(dr, dr))), 0.5)


def hybrid_loss(pred_l, pred_r, gt_l, gt_r, extractor=None, lambda_per=0.1,
                lambda_ssim=1.0, mode="per+ssim", ssim_params=None):
    """lambda_per * L_per + lambda_ssim * (-mean SSIM over both views).

    `mode="mse"` replaces the whole objective with plain MSE. The global
    minimum of either mode sits exactly at pred == gt.
    """
    if mode == "mse":
        return mse_loss(pred_l, pred_r, gt_l, gt_r)
    if mode != "per+ssim":
        raise ConfigError(f"unknown loss mode {mode!r}")
    s = T.mul(T.add(ssim(pred_l, gt_l, ssim_params),
                    ssim(pred_r, gt_r, ssim_params)), 0.5)
    total = T.mul(s, -lambda_ssim)
    if lambda_per > 0.0:
        if extractor is None:
            raise ConfigError("per+ssim loss with lambda_per > 0 needs an extractor")
        total = T.add(total, T.mul(
            perceptual_loss(pred_l, pred_r, gt_l, gt_r, extractor), lambda_per))
    return total


# ---------------------------------------------------------------------------
# evaluation metrics (pure numpy; no gradients involved)
# ---------------------------------------------------------------------------

def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """Full-range [0,1] RGB to studio-range luma: (16 + 65.481R + 128.553G
    + 24.966B) / 255, i.e. values in [16/255, 235/255]."""
    img = np.asarray(img)
    if img.shape[-3] != 3:
        raise ShapeError(f"rgb_to_y expects a leading channel axis of 3, got {img.shape}")
    r, g, b = img[..., 0, :, :], img[..., 1, :, :], img[..., 2, :, :]
    y = (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0
    return y[..., None, :, :]


def psnr(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); identical images give +inf."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"psnr: shapes differ, {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def error_map(derained: np.ndarray, gt: np.ndarray, gain: float = 4.0) -> np.ndarray:
    """Whiter-is-better error rendering: 1 - min(gain * mean |diff|, 1)."""
    derained = np.asarray(derained, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if derained.shape != gt.shape:
        raise ShapeError(
            f"error_map: shapes differ, {derained.shape} vs {gt.shape}")
    d = np.abs(derained - gt).mean(axis=-3)
    return 1.0 - np.minimum(d * gain, 1.0)


def y_channel_metrics(pred: np.ndarray, gt: np.ndarray,
                      ssim_params: SsimParams | None = None):
    """(PSNR dB, SSIM) on the luma channel of a [3,H,W] pair in [0,1]."""
    pred = np.clip(np.asarray(pred, dtype=np.float64), 0.0, 1.0)
    gt = np.clip(np.asarray(gt, dtype=np.float64), 0.0, 1.0)
    yp = rgb_to_y(pred)
    yg = rgb_to_y(gt)
    s = ssim(Tensor(yp[None]), Tensor(yg[None]), ssim_params).item()
    return psnr(yp, yg, peak=1.0), s

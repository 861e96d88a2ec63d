"""Dual-view mutual attention across epipolar rows.

Stereo views of the same scene differ only by horizontal disparity, so
cross-view matching happens within each image row: for every (batch, row)
slice, one view's queries attend over the other view's keys, producing a
WxW stochastic matrix per row. Each view's fused output is gated by a
zero-initialized per-channel scale and added back residually, so the whole
exchange is the identity at initialization.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import ChannelScale, Conv2d, Module


@dataclass
class AttentionMap:
    """Row-wise attention weights, [B, H, W, W]; each last-axis row sums to 1."""

    values: np.ndarray

    def save_debug_images(self, out_dir, prefix="attn", rows=None):
        """Dump selected per-row WxW slices as grayscale images."""
        from .data import save_image

        os.makedirs(out_dir, exist_ok=True)
        b, h, _, _ = self.values.shape
        rows = list(range(h)) if rows is None else list(rows)
        written = []
        for bi in range(b):
            for r in rows:
                sl = self.values[bi, r]
                img = np.repeat(sl[None, :, :], 3, axis=0)
                path = os.path.join(out_dir, f"{prefix}_b{bi}_row{r}.ppm")
                save_image(path, img / max(sl.max(), 1e-12))
                written.append(path)
        return written


def mutual_attention(q_a, k_b, v, d_k):
    """Row-wise scaled dot-product attention.

    All inputs are [B,C,H,W]. Per (b,h) row the WxC query slice of one view
    attends over the other view's WxC key slice; the value rows are mixed by
    the resulting WxW softmax weights. Returns the reassembled [B,C,H,W]
    output and the attention map.
    """
    if q_a.shape != k_b.shape or q_a.shape != v.shape:
        raise ShapeError(
            f"mutual_attention: mismatched views {q_a.shape} / {k_b.shape} / "
            f"{v.shape}")
    qr = T.permute(q_a, (0, 2, 3, 1))            # [B,H,W,C]
    kr = T.permute(k_b, (0, 2, 1, 3))            # [B,H,C,W]
    vr = T.permute(v, (0, 2, 3, 1))              # [B,H,W,C]
    logits = T.mul(T.matmul(qr, kr), 1.0 / math.sqrt(d_k))
    weights = T.softmax(logits, axis=-1)         # [B,H,W,W]
    out = T.permute(T.matmul(weights, vr), (0, 3, 1, 2))
    return out, AttentionMap(values=weights.data)


def attention_oracle(q_rows, k_rows, v_rows, d_k):
    """Triple-loop reference for one row: softmax(Q K^T / sqrt(d_k)) V.

    Test-support code for small W only; deliberately free of any vectorized
    shortcut so it cannot share a bug with :func:`mutual_attention`.
    """
    w = len(q_rows)
    c = len(q_rows[0])
    out = [[0.0] * c for _ in range(w)]
    scale = 1.0 / math.sqrt(d_k)
    for i in range(w):
        logits = []
        for j in range(w):
            s = 0.0
            for ch in range(c):
                s += q_rows[i][ch] * k_rows[j][ch]
            logits.append(s * scale)
        peak = max(logits)
        exps = [math.exp(l - peak) for l in logits]
        total = sum(exps)
        for j in range(w):
            weight = exps[j] / total
            for ch in range(c):
                out[i][ch] += weight * v_rows[j][ch]
    return out


class _Projection(Module):
    """Point-wise then depth-wise conv: channel refinement, then spatial."""

    def __init__(self, channels, rng=None, dtype=np.float32):
        self.pw = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.dw = Conv2d(channels, channels, 3, groups=channels, rng=rng,
                         dtype=dtype)

    def forward(self, x):
        return self.dw(self.pw(x))


class DmaLayer(Module):
    """Cross-view fusion layer.

    Each view projects its own query/key/value; queries of one view attend
    over the *other* view's keys. By default the value matrix comes from the
    query's own view; `cross_value=True` switches it to the opposite view.
    gamma1/gamma2 start at zero, so both outputs equal their inputs at
    initialization.
    """

    def __init__(self, channels, cross_value=False, rng=None, dtype=np.float32):
        self.q_l = _Projection(channels, rng=rng, dtype=dtype)
        self.k_l = _Projection(channels, rng=rng, dtype=dtype)
        self.v_l = _Projection(channels, rng=rng, dtype=dtype)
        self.q_r = _Projection(channels, rng=rng, dtype=dtype)
        self.k_r = _Projection(channels, rng=rng, dtype=dtype)
        self.v_r = _Projection(channels, rng=rng, dtype=dtype)
        self.out_l = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.out_r = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.gamma1 = ChannelScale(channels, dtype=dtype)
        self.gamma2 = ChannelScale(channels, dtype=dtype)
        self.d_k = channels
        self.cross_value = cross_value

    def project_qkv(self, f_l, f_r):
        if f_l.shape != f_r.shape:
            raise ShapeError(
                f"dma: left {f_l.shape} and right {f_r.shape} views differ")
        return (self.q_l(f_l), self.k_l(f_l), self.v_l(f_l),
                self.q_r(f_r), self.k_r(f_r), self.v_r(f_r))

    def forward(self, f_l, f_r, want_maps=False):
        ql, kl, vl, qr, kr, vr = self.project_qkv(f_l, f_r)
        val_for_l = vr if self.cross_value else vl
        val_for_r = vl if self.cross_value else vr
        fused_l, map_l = mutual_attention(ql, kr, val_for_l, self.d_k)
        fused_r, map_r = mutual_attention(qr, kl, val_for_r, self.d_k)
        out_l = T.add(self.gamma1(self.out_l(fused_l)), f_l)
        out_r = T.add(self.gamma2(self.out_r(fused_r)), f_r)
        if want_maps:
            return out_l, out_r, (map_l, map_r)
        return out_l, out_r

    def mirrored(self):
        """A copy with left/right roles swapped (projections, output convs,
        gammas). Used to verify the structural swap symmetry."""
        twin = object.__new__(DmaLayer)
        twin.q_l, twin.q_r = self.q_r, self.q_l
        twin.k_l, twin.k_r = self.k_r, self.k_l
        twin.v_l, twin.v_r = self.v_r, self.v_l
        twin.out_l, twin.out_r = self.out_r, self.out_l
        twin.gamma1, twin.gamma2 = self.gamma2, self.gamma1
        twin.d_k = self.d_k
        twin.cross_value = self.cross_value
        return twin

"""Adam training loop, evaluation pass, and checkpointing.

Checkpoint format (little-endian throughout): magic "SIRR", u32 version,
u32 tensor count, then per tensor: u16 name length, UTF-8 name, u8 ndim,
ndim x u32 dims, float32 payload. Optimizer moments, the step counter,
epoch, RNG state, and both configs ride in the same framing (configs as
UTF-8 JSON with one byte per float32 element, the RNG state as u16 chunks)
so a single frame parser reads everything.

Randomness inside the loop (shuffles, crops) is derived statelessly from
(seed, epoch, batch), which is what makes resume-from-checkpoint reproduce
an uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .data import random_crop
from .errors import CheckpointError, ConfigError, NumericsError
from .losses import PerceptualExtractor, hybrid_loss, y_channel_metrics
from .model import ModelConfig, StereoIrrModel, crop_to, pad_reflect
from .rng import RngState
from .tensor import Tape, Tensor

CHECKPOINT_MAGIC = b"SIRR"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.9
    weight_decay: float = 0.0
    eps: float = 1e-8
    batch_size: int = 3
    crop: int = 320
    epochs: int = 200
    milestone_every: int = 50
    decay_factor: float = 0.5
    seed: int = 0
    lambda_per: float = 0.1
    lambda_ssim: float = 1.0
    clip_norm: float = 0.0        # 0 disables gradient clipping
    checkpoint_every: int = 50

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown train config key(s): {unknown}")
        return cls(**d)


class AdamState:
    """First/second moment buffers per parameter name, plus the step count."""

    def __init__(self, named_params):
        self.m = {name: np.zeros_like(p.data) for name, p in named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in named_params}
        self.t = 0


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: lr * decay_factor ** floor(epoch / milestone_every)."""
    return cfg.lr * cfg.decay_factor ** (epoch // cfg.milestone_every)


def adam_step(named_params, state: AdamState, lr_t: float, cfg: TrainConfig):
    """Standard bias-corrected Adam update; missing gradients count as zero."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def clip_gradients(params, max_norm: float):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict
    adam_m: dict
    adam_v: dict
    adam_t: int
    epoch: int
    rng: RngState
    model_config: ModelConfig
    train_config: TrainConfig


def _write_frame(f, name: str, arr: np.ndarray):
    data = np.ascontiguousarray(arr, dtype="<f4")
    shape = data.shape if data.ndim else (1,)
    nb = name.encode("utf-8")
    f.write(struct.pack("<H", len(nb)))
    f.write(nb)
    f.write(struct.pack("<B", len(shape)))
    f.write(struct.pack(f"<{len(shape)}I", *shape))
    f.write(data.tobytes())


def _read_frame(buf: bytes, pos: int):
    def need(n, what):
        if pos_holder[0] + n > len(buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}",
                                  offset=pos_holder[0])

    pos_holder = [pos]
    need(2, "name length")
    (nlen,) = struct.unpack_from("<H", buf, pos_holder[0])
    pos_holder[0] += 2
    need(nlen, "tensor name")
    name = buf[pos_holder[0]:pos_holder[0] + nlen].decode("utf-8")
    pos_holder[0] += nlen
    need(1, "ndim")
    ndim = buf[pos_holder[0]]
    pos_holder[0] += 1
    need(4 * ndim, "dims")
    shape = struct.unpack_from(f"<{ndim}I", buf, pos_holder[0])
    pos_holder[0] += 4 * ndim
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    need(4 * count, f"payload of {name!r}")
    arr = np.frombuffer(buf, dtype="<f4", count=count,
                        offset=pos_holder[0]).reshape(shape).copy()
    pos_holder[0] += 4 * count
    return name, arr, pos_holder[0]


def _bytes_to_f32(raw: bytes) -> np.ndarray:
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def _f32_to_bytes(arr: np.ndarray) -> bytes:
    return arr.astype(np.uint8).tobytes()


def _u64_chunks(value: int) -> np.ndarray:
    value &= (1 << 64) - 1
    return np.array([(value >> (16 * i)) & 0xFFFF for i in range(4)],
                    dtype=np.float32)


def _chunks_u64(arr: np.ndarray) -> int:
    return sum(int(round(float(v))) << (16 * i) for i, v in enumerate(arr))


def save_checkpoint(path, ckpt: Checkpoint):
    frames = []
    for name, arr in ckpt.params.items():
        frames.append((f"param.{name}", arr))
    for name, arr in ckpt.adam_m.items():
        frames.append((f"adam.m.{name}", arr))
    for name, arr in ckpt.adam_v.items():
        frames.append((f"adam.v.{name}", arr))
    frames.append(("adam.t", np.array([ckpt.adam_t], dtype=np.float32)))
    frames.append(("meta.epoch", np.array([ckpt.epoch], dtype=np.float32)))
    frames.append(("meta.rng", np.concatenate(
        [_u64_chunks(ckpt.rng.seed), _u64_chunks(ckpt.rng.counter)])))
    frames.append(("meta.model_config", _bytes_to_f32(
        json.dumps(ckpt.model_config.to_dict(), sort_keys=True).encode("utf-8"))))
    frames.append(("meta.train_config", _bytes_to_f32(
        json.dumps(ckpt.train_config.to_dict(), sort_keys=True).encode("utf-8"))))

    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<I", CHECKPOINT_VERSION))
    out.write(struct.pack("<I", len(frames)))
    for name, arr in frames:
        _write_frame(out, name, arr)
    with open(path, "wb") as f:
        f.write(out.getvalue())


def save_checkpoint_tensors(path, tensors: dict):
    """Write a bare name -> array mapping in the checkpoint framing; used for
    standalone weight files (e.g. perceptual-extractor weights)."""
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<I", CHECKPOINT_VERSION))
    out.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        _write_frame(out, name, np.asarray(arr))
    with open(path, "wb") as f:
        f.write(out.getvalue())


def load_checkpoint_tensors(path) -> dict:
    """Raw name -> float32 array mapping, no interpretation of names."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}", offset=0)
    if len(buf) < 12:
        raise CheckpointError("truncated checkpoint header", offset=len(buf))
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", offset=4)
    (count,) = struct.unpack_from("<I", buf, 8)
    tensors = {}
    pos = 12
    for _ in range(count):
        name, arr, pos = _read_frame(buf, pos)
        tensors[name] = arr
    return tensors


def load_checkpoint(path) -> Checkpoint:
    tensors = load_checkpoint_tensors(path)
    params, adam_m, adam_v = {}, {}, {}
    meta = {}
    for name, arr in tensors.items():
        if name.startswith("param."):
            params[name[len("param."):]] = arr
        elif name.startswith("adam.m."):
            adam_m[name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            adam_v[name[len("adam.v."):]] = arr
        else:
            meta[name] = arr
    for required in ("adam.t", "meta.epoch", "meta.rng", "meta.model_config",
                     "meta.train_config"):
        if required not in meta:
            raise CheckpointError(f"checkpoint missing {required!r} block")
    model_config = ModelConfig.from_dict(
        json.loads(_f32_to_bytes(meta["meta.model_config"]).decode("utf-8")))
    train_config = TrainConfig.from_dict(
        json.loads(_f32_to_bytes(meta["meta.train_config"]).decode("utf-8")))
    rng_chunks = meta["meta.rng"]
    return Checkpoint(
        params=params, adam_m=adam_m, adam_v=adam_v,
        adam_t=int(meta["adam.t"][0]), epoch=int(meta["meta.epoch"][0]),
        rng=RngState(seed=_chunks_u64(rng_chunks[:4]),
                     counter=_chunks_u64(rng_chunks[4:8])),
        model_config=model_config, train_config=train_config)


def ensure_compatible(expected: ModelConfig, found: ModelConfig):
    diffs = [f"{f.name}: expected {getattr(expected, f.name)!r}, "
             f"checkpoint has {getattr(found, f.name)!r}"
             for f in fields(ModelConfig)
             if getattr(expected, f.name) != getattr(found, f.name)]
    if diffs:
        raise ConfigError("incompatible model config; differing fields: "
                          + "; ".join(diffs))


def checkpoint_from(model: StereoIrrModel, adam: AdamState, epoch: int,
                    rng: RngState, train_config: TrainConfig) -> Checkpoint:
    return Checkpoint(
        params={name: p.data.copy() for name, p in model.named_parameters()},
        adam_m={k: v.copy() for k, v in adam.m.items()},
        adam_v={k: v.copy() for k, v in adam.v.items()},
        adam_t=adam.t, epoch=epoch, rng=rng.copy(),
        model_config=model.config, train_config=train_config)


def restore_into(model: StereoIrrModel, ckpt: Checkpoint) -> AdamState:
    ensure_compatible(model.config, ckpt.model_config)
    model.load_state_dict(ckpt.params)
    named = list(model.named_parameters())
    adam = AdamState(named)
    for name, _ in named:
        if name not in ckpt.adam_m or name not in ckpt.adam_v:
            raise CheckpointError(f"checkpoint missing optimizer state for {name!r}")
        adam.m[name] = ckpt.adam_m[name].copy()
        adam.v[name] = ckpt.adam_v[name].copy()
    adam.t = ckpt.adam_t
    return adam


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

@dataclass
class LogRow:
    epoch: int
    lr: float
    loss: float
    seconds: float


def iter_batches(n: int, batch_size: int, epoch: int, seed: int):
    """Seeded per-epoch shuffle, chunked; the final short batch is kept."""
    from .rng import stream

    order = stream(seed, "shuffle", epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield [int(i) for i in order[start:start + batch_size]]


def _batch_tensors(crops):
    xl = Tensor(np.stack([c.rainy_l for c in crops]))
    xr = Tensor(np.stack([c.rainy_r for c in crops]))
    yl = Tensor(np.stack([c.clean_l for c in crops]))
    yr = Tensor(np.stack([c.clean_r for c in crops]))
    return xl, xr, yl, yr


def train_loop(model: StereoIrrModel, samples, cfg: TrainConfig, out_dir=None,
               resume: Checkpoint | None = None, extractor=None,
               epoch_hook=None):
    """Train `model` on `samples`; returns the per-epoch log rows.

    With `out_dir` set, appends to `log.csv` and writes `ckpt_latest.sirr`
    every `checkpoint_every` epochs plus `ckpt_final.sirr` at the end.
    Seeded shuffles/crops are derived per (seed, epoch, batch), so resuming
    from a checkpoint continues the exact uninterrupted trajectory.
    """
    if not samples:
        raise ConfigError("train_loop needs a non-empty dataset")
    from .rng import stream  # local alias; used for stateless per-epoch draws

    named = list(model.named_parameters())
    plist = [p for _, p in named]
    start_epoch = 0
    if resume is not None:
        adam = restore_into(model, resume)
        start_epoch = resume.epoch + 1
    else:
        adam = AdamState(named)

    needs_extractor = (model.config.loss_mode == "per+ssim" and cfg.lambda_per > 0)
    if extractor is None and needs_extractor:
        extractor = PerceptualExtractor()

    log_path = os.path.join(out_dir, "log.csv") if out_dir else None
    if log_path:
        os.makedirs(out_dir, exist_ok=True)
        new_file = resume is None or not os.path.exists(log_path)
        log_file = open(log_path, "w" if new_file else "a",
                        newline="", encoding="utf-8")
        writer = csv.writer(log_file)
        if new_file:
            writer.writerow(["epoch", "lr", "loss", "seconds"])
    else:
        log_file = writer = None

    rows = []
    try:
        for epoch in range(start_epoch, cfg.epochs):
            t0 = time.perf_counter()
            lr_t = lr_schedule(epoch, cfg)
            losses = []
            for bi, batch_ids in enumerate(
                    iter_batches(len(samples), cfg.batch_size, epoch, cfg.seed)):
                gen = stream(cfg.seed, "crop", epoch, bi)
                crops = [random_crop(samples[i], cfg.crop, gen) for i in batch_ids]
                xl, xr, yl, yr = _batch_tensors(crops)
                with Tape() as tape:
                    pl, pr = model(xl, xr)
                    loss = hybrid_loss(
                        pl, pr, yl, yr, extractor=extractor,
                        lambda_per=cfg.lambda_per, lambda_ssim=cfg.lambda_ssim,
                        mode=model.config.loss_mode)
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    names = [samples[i].sample_id or str(i) for i in batch_ids]
                    raise NumericsError(
                        f"non-finite loss {loss_val} at epoch {epoch}, "
                        f"batch {bi} (samples {names})")
                tape.backward(loss, params=plist)
                if cfg.clip_norm > 0:
                    clip_gradients(plist, cfg.clip_norm)
                adam_step(named, adam, lr_t, cfg)
                model.zero_grad()
                losses.append(loss_val)
            row = LogRow(epoch=epoch, lr=lr_t, loss=float(np.mean(losses)),
                         seconds=time.perf_counter() - t0)
            rows.append(row)
            if writer:
                writer.writerow([row.epoch, f"{row.lr:.10g}",
                                 f"{row.loss:.8f}", f"{row.seconds:.3f}"])
                log_file.flush()
            if out_dir:
                last = epoch == cfg.epochs - 1
                if (epoch + 1) % cfg.checkpoint_every == 0 or last:
                    ckpt = checkpoint_from(
                        model, adam, epoch,
                        RngState(cfg.seed, counter=epoch + 1), cfg)
                    save_checkpoint(
                        os.path.join(out_dir, "ckpt_latest.sirr"), ckpt)
                    if last:
                        save_checkpoint(
                            os.path.join(out_dir, "ckpt_final.sirr"), ckpt)
            if epoch_hook is not None and epoch_hook(epoch, model, row):
                break
    finally:
        if log_file:
            log_file.close()
    return rows


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    rows: list          # (dataset, sample_id, view, psnr_db, ssim)
    summary: dict = field(default_factory=dict)


def _fmt(value):
    return "inf" if math.isinf(value) else f"{value:.6f}"


def evaluate(model: StereoIrrModel, samples, csv_path=None, dataset_name="eval",
             include_baseline=False) -> EvalResult:
    """Y-channel PSNR/SSIM per view; Total = mean of the two view means."""
    levels = model.config.levels
    rows = []
    stats = {"left": [], "right": []}
    for idx, s in enumerate(samples):
        sid = s.sample_id or str(idx)
        xl, spec = pad_reflect(s.rainy_l[None], levels)
        xr, _ = pad_reflect(s.rainy_r[None], levels)
        pl, pr = model(Tensor(xl), Tensor(xr))
        out_l = np.clip(crop_to(pl.data[0], spec), 0.0, 1.0)
        out_r = np.clip(crop_to(pr.data[0], spec), 0.0, 1.0)
        for view, out, gt, rainy in (("left", out_l, s.clean_l, s.rainy_l),
                                     ("right", out_r, s.clean_r, s.rainy_r)):
            p, ss = y_channel_metrics(out, gt)
            rows.append((dataset_name, sid, view, p, ss))
            stats[view].append((p, ss))
            if include_baseline:
                bp, bs = y_channel_metrics(rainy, gt)
                rows.append((dataset_name, sid, f"{view}_input", bp, bs))

    summary = {}
    for view in ("left", "right"):
        ps = [p for p, _ in stats[view]]
        sss = [ss for _, ss in stats[view]]
        summary[f"psnr_{view}"] = float(np.mean(ps))
        summary[f"ssim_{view}"] = float(np.mean(sss))
    summary["psnr_total"] = (summary["psnr_left"] + summary["psnr_right"]) / 2.0
    summary["ssim_total"] = (summary["ssim_left"] + summary["ssim_right"]) / 2.0

    if csv_path:
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["dataset", "sample_id", "view", "psnr_db", "ssim"])
            for dataset, sid, view, p, ss in rows:
                writer.writerow([dataset, sid, view, _fmt(p), _fmt(ss)])
            writer.writerow([dataset_name, "TOTAL", "mean",
                             _fmt(summary["psnr_total"]),
                             _fmt(summary["ssim_total"])])
    return EvalResult(rows=rows, summary=summary)

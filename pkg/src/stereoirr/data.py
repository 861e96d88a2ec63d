"""Synthetic stereo scenes, additive rain, and dataset plumbing.

Scenes are layered: each depth plane gets a textured surface (gradient plus
random rectangles/ellipses) rendered on a canvas extended horizontally by
the maximum disparity. The left view reads the canvas at x, the right view
at x + disparity(layer), with disparity = round(fb / depth), inversely
proportional to depth, and occlusion resolved by back-to-front
compositing. Both views therefore sample identical floats wherever a
surface is visible in both, which makes stereo correspondence exact rather
than approximate.

Rain is an additive non-negative layer of anti-aliased line segments:
rainy = clamp(clean + rain, 0, 1). A correlation knob controls how many
streaks the two views share.

In-memory images are float32 [3,H,W] in [0,1]; files are 8-bit PPM (P6),
with PNG available behind the same load/save interface.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import DataError, FormatError
from .rng import stream


@dataclass
class SceneParams:
    seed: int = 0
    height: int = 96
    width: int = 128
    layer_depths: tuple = (8.0, 4.0, 2.0)   # ordered far to near
    fb: float = 16.0                        # focal length * baseline
    rects_per_layer: int = 2
    ellipses_per_layer: int = 1

    def __post_init__(self):
        self.layer_depths = tuple(float(z) for z in self.layer_depths)
        if any(z <= 0 for z in self.layer_depths):
            raise DataError("layer depths must be positive")
        if list(self.layer_depths) != sorted(self.layer_depths, reverse=True):
            raise DataError("layer depths must be ordered far to near (decreasing)")
        for z in self.layer_depths:
            if round(self.fb / z) > self.width / 4:
                raise DataError(
                    f"disparity {round(self.fb / z)} for depth {z} exceeds "
                    f"width/4 = {self.width / 4}")

    @property
    def disparities(self):
        return tuple(int(round(self.fb / z)) for z in self.layer_depths)


@dataclass
class RainParams:
    seed: int = 0
    density: float = 1.2                    # streaks per kilopixel
    angle_range: tuple = (-20.0, 20.0)      # degrees from vertical
    length_range: tuple = (8.0, 20.0)
    width_range: tuple = (0.8, 1.6)
    intensity_range: tuple = (0.15, 0.5)
    correlation: float = 0.7                # 1 = identical rain in both views

    def __post_init__(self):
        self.angle_range = tuple(float(v) for v in self.angle_range)
        self.length_range = tuple(float(v) for v in self.length_range)
        self.width_range = tuple(float(v) for v in self.width_range)
        self.intensity_range = tuple(float(v) for v in self.intensity_range)
        if not 0.0 <= self.correlation <= 1.0:
            raise DataError("rain correlation must lie in [0, 1]")
        if self.intensity_range[0] <= 0 or self.intensity_range[1] > 1:
            raise DataError("rain intensity range must lie in (0, 1]")


@dataclass
class StereoSample:
    rainy_l: np.ndarray
    rainy_r: np.ndarray
    clean_l: np.ndarray
    clean_r: np.ndarray
    scene: SceneParams
    rain: RainParams
    sample_id: str = ""


@dataclass
class SceneRender:
    """Clean pair plus per-pixel visible-layer indices for both views."""

    left: np.ndarray
    right: np.ndarray
    layer_map_l: np.ndarray
    layer_map_r: np.ndarray
    disparities: tuple

    def correspondence_mask(self):
        """Right-view pixels whose matching left pixel shows the same layer
        (not occluded, not out of frame). Returns (mask[H,W], left_x[H,W])."""
        h, w = self.layer_map_r.shape
        disp = np.asarray(self.disparities)[self.layer_map_r]
        xs = np.arange(w)[None, :] + disp
        valid = xs < w
        xs_safe = np.minimum(xs, w - 1)
        same = self.layer_map_l[np.arange(h)[:, None], xs_safe] == self.layer_map_r
        return valid & same, xs_safe


def _layer_texture(gen, h, w_ext, n_rect, n_ell, full_cover):
    """One layer's RGB texture and coverage mask on the extended canvas."""
    u = np.linspace(0.0, 1.0, w_ext, dtype=np.float32)[None, :]
    v = np.linspace(0.0, 1.0, h, dtype=np.float32)[:, None]
    tex = np.empty((3, h, w_ext), dtype=np.float32)
    for c in range(3):
        base = gen.uniform(0.15, 0.85)
        gu = gen.uniform(-0.4, 0.4)
        gv = gen.uniform(-0.4, 0.4)
        tex[c] = np.clip(base + gu * u + gv * v, 0.0, 1.0)
    mask = np.ones((h, w_ext), dtype=bool) if full_cover else np.zeros((h, w_ext), dtype=bool)

    yy = np.arange(h)[:, None]
    xx = np.arange(w_ext)[None, :]
    for _ in range(n_rect):
        rh = int(gen.integers(h // 6, max(h // 2, h // 6 + 1)))
        rw = int(gen.integers(w_ext // 8, max(w_ext // 3, w_ext // 8 + 1)))
        y0 = int(gen.integers(0, max(h - rh, 1)))
        x0 = int(gen.integers(0, max(w_ext - rw, 1)))
        color = gen.uniform(0.1, 0.9, size=3).astype(np.float32)
        region = (yy >= y0) & (yy < y0 + rh) & (xx >= x0) & (xx < x0 + rw)
        tex[:, region] = color[:, None]
        if not full_cover:
            mask |= region
    for _ in range(n_ell):
        cy = gen.uniform(0.2, 0.8) * h
        cx = gen.uniform(0.2, 0.8) * w_ext
        ry = gen.uniform(h / 10, h / 4)
        rx = gen.uniform(w_ext / 14, w_ext / 5)
        color = gen.uniform(0.1, 0.9, size=3).astype(np.float32)
        region = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        tex[:, region] = color[:, None]
        if not full_cover:
            mask |= region
    return tex, mask


def synth_scene(params: SceneParams) -> SceneRender:
    """Render the clean stereo pair with exact per-layer disparities."""
    h, w = params.height, params.width
    disps = params.disparities
    d_max = max(disps) if disps else 0
    w_ext = w + d_max

    layers = []
    for i in range(len(params.layer_depths)):
        gen = stream(params.seed, "scene-layer", i)
        layers.append(_layer_texture(
            gen, h, w_ext, params.rects_per_layer, params.ellipses_per_layer,
            full_cover=(i == 0)))

    left = np.zeros((3, h, w), dtype=np.float32)
    right = np.zeros((3, h, w), dtype=np.float32)
    lmap_l = np.zeros((h, w), dtype=np.int32)
    lmap_r = np.zeros((h, w), dtype=np.int32)
    for i, ((tex, mask), d) in enumerate(zip(layers, disps)):
        tl, ml = tex[:, :, :w], mask[:, :w]
        tr, mr = tex[:, :, d:d + w], mask[:, d:d + w]
        left[:, ml] = tl[:, ml]
        right[:, mr] = tr[:, mr]
        lmap_l[ml] = i
        lmap_r[mr] = i
    return SceneRender(left=left, right=right, layer_map_l=lmap_l,
                       layer_map_r=lmap_r, disparities=disps)


def _draw_streaks(canvas, gen, count, params: RainParams):
    h, w = canvas.shape
    for _ in range(count):
        cx = gen.uniform(0, w)
        cy = gen.uniform(0, h)
        theta = math.radians(gen.uniform(*params.angle_range))
        length = gen.uniform(*params.length_range)
        width = gen.uniform(*params.width_range)
        amp = gen.uniform(*params.intensity_range)
        dx, dy = math.sin(theta), math.cos(theta)
        x0, y0 = cx - 0.5 * length * dx, cy - 0.5 * length * dy
        x1, y1 = cx + 0.5 * length * dx, cy + 0.5 * length * dy
        pad = width / 2 + 1.5
        xa = max(int(min(x0, x1) - pad), 0)
        xb = min(int(max(x0, x1) + pad) + 1, w)
        ya = max(int(min(y0, y1) - pad), 0)
        yb = min(int(max(y0, y1) + pad) + 1, h)
        if xa >= xb or ya >= yb:
            continue
        ys, xs = np.mgrid[ya:yb, xa:xb]
        px = xs - x0
        py = ys - y0
        t = np.clip((px * (x1 - x0) + py * (y1 - y0)) / (length * length), 0.0, 1.0)
        dist = np.hypot(px - t * (x1 - x0), py - t * (y1 - y0))
        alpha = np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)
        canvas[ya:yb, xa:xb] += (amp * alpha).astype(np.float32)


def synth_rain(clean: np.ndarray, params: RainParams, view_tag: str):
    """Additive rain for one view: returns (rainy [3,H,W], rain_layer [H,W]).

    A fraction `correlation` of the streaks is drawn from a stream shared by
    both views; the rest are resampled per view, so the two views see
    overlapping but non-identical rain fields.
    """
    _, h, w = clean.shape
    n = max(int(round(params.density * h * w / 1000.0)), 0)
    n_shared = int(round(params.correlation * n))
    rain = np.zeros((h, w), dtype=np.float32)
    _draw_streaks(rain, stream(params.seed, "rain-shared"), n_shared, params)
    _draw_streaks(rain, stream(params.seed, "rain-view", view_tag),
                  n - n_shared, params)
    rainy = np.clip(clean + rain[None, :, :], 0.0, 1.0)
    return rainy, rain


def make_sample(scene: SceneParams, rain: RainParams, sample_id="") -> StereoSample:
    render = synth_scene(scene)
    rainy_l, _ = synth_rain(render.left, rain, "left")
    rainy_r, _ = synth_rain(render.right, rain, "right")
    return StereoSample(rainy_l=rainy_l, rainy_r=rainy_r, clean_l=render.left,
                        clean_r=render.right, scene=scene, rain=rain,
                        sample_id=sample_id)


def random_crop(sample: StereoSample, size: int, gen: np.random.Generator) -> StereoSample:
    """One crop window applied to all four images, preserving stereo rows."""
    _, h, w = sample.clean_l.shape
    if size > h or size > w:
        raise DataError(f"crop {size} exceeds image size {h}x{w}")
    top = int(gen.integers(0, h - size + 1))
    left = int(gen.integers(0, w - size + 1))
    sl = (slice(None), slice(top, top + size), slice(left, left + size))
    return StereoSample(
        rainy_l=sample.rainy_l[sl], rainy_r=sample.rainy_r[sl],
        clean_l=sample.clean_l[sl], clean_r=sample.clean_r[sl],
        scene=sample.scene, rain=sample.rain, sample_id=sample.sample_id)


# ---------------------------------------------------------------------------
# image I/O
# ---------------------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    """float [3,H,W] in [0,1] -> uint8 [H,W,3] (rounding, clamped)."""
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    """uint8 [H,W,3] -> float32 [3,H,W] in [0,1]."""
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)


def save_ppm(path, img: np.ndarray):
    arr = to_uint8(img) if img.ndim == 3 and img.shape[0] == 3 else np.asarray(img)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError(f"save_ppm needs uint8 HxWx3 or float [3,H,W], got "
                          f"{arr.shape} {arr.dtype}")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def _ppm_token(buf: bytes, pos: int):
    """Next whitespace-delimited token, skipping '#' comments."""
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("unexpected end of PPM header", offset=start)
    return buf[start:pos], pos


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:2] != b"P6":
        raise FormatError(f"not a P6 PPM file: magic {buf[:2]!r}", offset=0)
    pos = 2
    try:
        wtok, pos = _ppm_token(buf, pos)
        htok, pos = _ppm_token(buf, pos)
        mtok, pos = _ppm_token(buf, pos)
        w, h, maxval = int(wtok), int(htok), int(mtok)
    except ValueError as exc:
        raise FormatError(f"bad PPM header field: {exc}", offset=pos) from exc
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval} (only 255)", offset=pos)
    pos += 1  # single whitespace byte after maxval
    need = w * h * 3
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise FormatError(
            f"truncated PPM payload: need {need} bytes, have {len(payload)}",
            offset=pos + len(payload))
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return from_uint8(arr)


def save_image(path, img: np.ndarray):
    """Write float [3,H,W] in [0,1]; format chosen by extension (.ppm/.png)."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ppm":
        save_ppm(path, img)
    elif ext == ".png":
        from PIL import Image

        Image.fromarray(to_uint8(img)).save(path)
    else:
        raise FormatError(f"unsupported image extension {ext!r} (use .ppm or .png)")


def load_image(path) -> np.ndarray:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ppm":
        return load_ppm(path)
    if ext == ".png":
        from PIL import Image

        arr = np.asarray(Image.open(path).convert("RGB"))
        return from_uint8(arr)
    raise FormatError(f"unsupported image extension {ext!r} (use .ppm or .png)")


# ---------------------------------------------------------------------------
# dataset building and loading
# ---------------------------------------------------------------------------

_TEST_SEED_OFFSET = 1_000_000


def _flatten(prefix, params) -> dict:
    return {f"{prefix}.{k}": (list(v) if isinstance(v, tuple) else v)
            for k, v in asdict(params).items()}


def _unflatten(record, prefix, cls):
    kwargs = {}
    for f in fields(cls):
        key = f"{prefix}.{f.name}"
        if key in record:
            v = record[key]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)


def build_dataset(out_dir, n_train, n_test, seed, scene_base: SceneParams | None = None,
                  rain_base: RainParams | None = None, force=False) -> str:
    """Write train/test sample directories plus a JSON-lines manifest.

    Sample i of the train split uses scene/rain seeds derived from
    (seed + i); the test split starts at seed + 1_000_000, keeping the seed
    ranges disjoint. Refuses a non-empty output directory unless forced.
    """
    if n_train > _TEST_SEED_OFFSET:
        raise DataError(f"n_train must be <= {_TEST_SEED_OFFSET}")
    scene_base = scene_base or SceneParams()
    rain_base = rain_base or RainParams()
    out_dir = str(out_dir)
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise DataError(
            f"output directory {out_dir!r} is not empty; pass force to overwrite")
    os.makedirs(out_dir, exist_ok=True)

    records = []
    specs = [("train", i, seed + i) for i in range(n_train)]
    specs += [("test", i, seed + _TEST_SEED_OFFSET + i) for i in range(n_test)]
    for split, idx, sample_seed in specs:
        scene = SceneParams(**{**asdict(scene_base), "seed": sample_seed})
        rain = RainParams(**{**asdict(rain_base), "seed": sample_seed})
        sample_id = f"{split}/{idx:05d}"
        sample = make_sample(scene, rain, sample_id=sample_id)
        sample_dir = os.path.join(out_dir, split, f"{idx:05d}")
        os.makedirs(sample_dir, exist_ok=True)
        paths = {}
        for name in ("rainy_l", "rainy_r", "clean_l", "clean_r"):
            rel = os.path.join(split, f"{idx:05d}", f"{name}.ppm")
            save_ppm(os.path.join(out_dir, rel), getattr(sample, name))
            paths[name] = rel
        record = {"id": sample_id, "split": split, **paths,
                  **_flatten("scene", scene), **_flatten("rain", rain)}
        records.append(record)

    manifest = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return manifest


def load_manifest(manifest_path):
    records = []
    with open(manifest_path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(
                    f"bad manifest line {line_no}: {exc}") from exc
    return records


def load_dataset(data_dir, split=None):
    """Read every sample of a built dataset into memory."""
    manifest = os.path.join(str(data_dir), "manifest.jsonl")
    if not os.path.isfile(manifest):
        raise DataError(f"no manifest at {manifest!r}; is this a dataset dir?")
    samples = []
    for record in load_manifest(manifest):
        if split is not None and record.get("split") != split:
            continue
        imgs = {name: load_image(os.path.join(str(data_dir), record[name]))
                for name in ("rainy_l", "rainy_r", "clean_l", "clean_r")}
        samples.append(StereoSample(
            **imgs,
            scene=_unflatten(record, "scene", SceneParams),
            rain=_unflatten(record, "rain", RainParams),
            sample_id=record["id"]))
    if not samples:
        raise DataError(f"no samples found in {data_dir!r} (split={split!r})")
    return samples

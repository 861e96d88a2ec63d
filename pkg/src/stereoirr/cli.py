"""Command-line entry point.

Subcommands: gen-data, train, infer, eval, ablate. Configuration comes from
a flat key=value file with dotted namespaces (model.width=30,
train.lr=5e-4) plus command-line overrides of the same form, override wins.
Unknown keys are rejected by name.

Exit codes: 0 success, 1 usage/config error, 2 data or file-format error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields

import numpy as np

from .data import (RainParams, SceneParams, build_dataset, load_dataset,
                   load_image, save_image)
from .errors import (CheckpointError, ConfigError, DataError, FormatError,
                     NumericsError)
from .losses import error_map
from .model import ModelConfig, StereoIrrModel, count_parameters, crop_to, pad_reflect
from .rng import RngState
from .tensor import Tensor
from .training import (TrainConfig, ensure_compatible, evaluate,
                       load_checkpoint, restore_into, train_loop)


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_NAMESPACES = {
    "model": ModelConfig,
    "train": TrainConfig,
    "scene": SceneParams,
    "rain": RainParams,
}


def _coerce(raw: str, sample):
    """Parse a string to the type of `sample` (a dataclass default value)."""
    if isinstance(sample, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "on", "yes"):
            return True
        if low in ("0", "false", "off", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(sample, int):
        return int(raw)
    if isinstance(sample, float):
        return float(raw)
    if isinstance(sample, tuple):
        body = raw.strip().strip("[]()")
        parts = [p for p in body.replace(",", " ").split() if p]
        out = []
        for p in parts:
            try:
                out.append(int(p))
            except ValueError:
                out.append(float(p))
        return tuple(out)
    return raw


def _known_keys():
    keys = {}
    for ns, cls in _NAMESPACES.items():
        for f in fields(cls):
            keys[f"{ns}.{f.name}"] = (ns, f.name)
    return keys


def parse_config_file(path) -> dict:
    """Flat key=value lines; '#' starts a comment; blank lines ignored."""
    items = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(
                    f"{path}:{line_no}: expected key=value, got {stripped!r}")
            key, value = stripped.split("=", 1)
            items[key.strip()] = value.strip()
    return items


def _collect_overrides(pairs):
    items = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"override must look like ns.key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        items[key.strip()] = value.strip()
    return items


def _extract_dotted_flags(rest):
    """Turn leftover `--ns.key value` / `--ns.key=value` tokens into pairs."""
    items = {}
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            key, value = body.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(rest):
                raise UsageError(f"flag {tok!r} needs a value")
            key, value = body, rest[i + 1]
            i += 2
        items[key] = value
    return items


def build_configs(config_file=None, overrides=None):
    """Merged, validated view over all four config namespaces."""
    raw = {}
    if config_file:
        raw.update(parse_config_file(config_file))
    raw.update(overrides or {})
    known = _known_keys()
    values = {ns: {} for ns in _NAMESPACES}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown configuration key {key!r}")
        ns, name = known[key]
        sample = getattr(_NAMESPACES[ns](), name)
        values[ns][name] = _coerce(value, sample)
    return {ns: cls(**values[ns]) for ns, cls in _NAMESPACES.items()}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, extra):
    cfgs = build_configs(args.config, {**_collect_overrides(args.set), **extra})
    manifest = build_dataset(args.out, args.train, args.test, args.seed,
                             scene_base=cfgs["scene"], rain_base=cfgs["rain"],
                             force=args.force)
    print(manifest)
    return 0


def _build_model(model_cfg: ModelConfig, seed: int) -> StereoIrrModel:
    return StereoIrrModel(model_cfg, rng=RngState(seed).split("init"))


def cmd_train(args, extra):
    cfgs = build_configs(args.config, {**_collect_overrides(args.set), **extra})
    model_cfg, train_cfg = cfgs["model"], cfgs["train"]
    samples = load_dataset(args.data, split="train")
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        ensure_compatible(model_cfg, resume.model_config)
    model = _build_model(model_cfg, train_cfg.seed)
    print(f"model parameters: {model.parameter_count()}")
    rows = train_loop(model, samples, train_cfg, out_dir=args.out, resume=resume)
    if rows:
        print(f"trained epochs {rows[0].epoch}..{rows[-1].epoch}, "
              f"final loss {rows[-1].loss:.6f}")
    print(os.path.join(args.out, "ckpt_final.sirr"))
    return 0


def _load_model_from_checkpoint(path):
    ckpt = load_checkpoint(path)
    model = _build_model(ckpt.model_config, ckpt.train_config.seed)
    restore_into(model, ckpt)
    return model, ckpt


def cmd_infer(args, extra):
    if extra:
        raise UsageError(f"unexpected arguments: {sorted(extra)}")
    model, _ = _load_model_from_checkpoint(args.ckpt)
    os.makedirs(args.out, exist_ok=True)
    x_l = load_image(args.left)
    x_r = load_image(args.right)
    if x_l.shape != x_r.shape:
        raise DataError(
            f"left {x_l.shape} and right {x_r.shape} images must match")
    levels = model.config.levels
    pl_, spec = pad_reflect(x_l[None], levels)
    pr_, _ = pad_reflect(x_r[None], levels)
    out_l, out_r = model(Tensor(pl_), Tensor(pr_))
    ext = os.path.splitext(args.left)[1].lower() or ".ppm"
    paths = []
    for tag, out in (("left", out_l), ("right", out_r)):
        img = np.clip(crop_to(out.data[0], spec), 0.0, 1.0)
        path = os.path.join(args.out, f"derained_{tag}{ext}")
        save_image(path, img)
        paths.append(path)
    print("\n".join(paths))
    return 0


def cmd_eval(args, extra):
    if extra:
        raise UsageError(f"unexpected arguments: {sorted(extra)}")
    model, _ = _load_model_from_checkpoint(args.ckpt)
    samples = load_dataset(args.data, split=args.split)
    result = evaluate(model, samples, csv_path=args.out,
                      dataset_name=os.path.basename(os.path.normpath(args.data)),
                      include_baseline=True)
    if args.error_maps:
        os.makedirs(args.error_maps, exist_ok=True)
        levels = model.config.levels
        for s in samples:
            xl, spec = pad_reflect(s.rainy_l[None], levels)
            xr, _ = pad_reflect(s.rainy_r[None], levels)
            pl_, pr_ = model(Tensor(xl), Tensor(xr))
            for view, out, gt, rainy in (
                    ("left", pl_.data[0], s.clean_l, s.rainy_l),
                    ("right", pr_.data[0], s.clean_r, s.rainy_r)):
                derained = np.clip(crop_to(out, spec), 0.0, 1.0)
                base = s.sample_id.replace("/", "_")
                for tag, img in (("derained", error_map(derained, gt)),
                                 ("rainy", error_map(rainy, gt))):
                    gray = np.repeat(img[None], 3, axis=0)
                    save_image(os.path.join(
                        args.error_maps, f"{base}_{view}_{tag}.ppm"), gray)
    for key in ("psnr_left", "psnr_right", "psnr_total",
                "ssim_left", "ssim_right", "ssim_total"):
        print(f"{key}: {result.summary[key]:.4f}")
    print(args.out)
    return 0


_GRID_SHORTHAND = {
    "dma": ("model", "use_dma"),
    "scale": ("model", "multi_scale"),
    "loss": ("model", "loss_mode"),
    "width": ("model", "width"),
    "encoder": ("model", "encoder_blocks"),
    "decoder": ("model", "decoder_blocks"),
    "middle": ("model", "middle_blocks"),
    "patch": ("train", "crop"),
}


def parse_grid(path):
    """One variant per line: `name [key=value ...]`. Keys may be shorthand
    axes (dma, scale, loss, width, ...) or dotted model./train. keys."""
    known = _known_keys()
    variants = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            parts = stripped.split()
            name, deltas = parts[0], {}
            for part in parts[1:]:
                if "=" not in part:
                    raise ConfigError(
                        f"{path}:{line_no}: expected key=value, got {part!r}")
                key, value = part.split("=", 1)
                if key in _GRID_SHORTHAND:
                    ns, field_name = _GRID_SHORTHAND[key]
                    if value.lower() in ("on", "off") and key in ("dma", "scale"):
                        value = "true" if value.lower() == "on" else "false"
                elif key in known:
                    ns, field_name = known[key]
                else:
                    raise ConfigError(
                        f"{path}:{line_no}: unknown variant key {key!r}")
                deltas[(ns, field_name)] = value
            variants.append((name, deltas))
    if not variants:
        raise ConfigError(f"ablation grid {path!r} lists no variants")
    return variants


def run_ablation(variants, train_samples, eval_samples, base_model: ModelConfig,
                 base_train: TrainConfig, out_csv):
    """Train every variant with the same seed/budget; emit one CSV row each."""
    import csv as _csv

    rows = []
    for name, deltas in variants:
        model_kwargs = base_model.to_dict()
        train_kwargs = base_train.to_dict()
        changes = []
        for (ns, field_name), raw in deltas.items():
            target = model_kwargs if ns == "model" else train_kwargs
            if ns not in ("model", "train"):
                raise ConfigError(
                    f"variant {name!r}: only model/train axes can vary, "
                    f"got {ns}.{field_name}")
            sample = getattr(_NAMESPACES[ns](), field_name)
            target[field_name] = _coerce(raw, sample)
            changes.append(f"{ns}.{field_name}={target[field_name]}")
        model_cfg = ModelConfig.from_dict(model_kwargs)
        train_cfg = TrainConfig.from_dict(train_kwargs)
        model = _build_model(model_cfg, train_cfg.seed)
        log = train_loop(model, train_samples, train_cfg)
        result = evaluate(model, eval_samples, dataset_name=name)
        rows.append({
            "variant": name,
            "changes": " ".join(changes) or "-",
            "final_loss": log[-1].loss if log else float("nan"),
            "seed": train_cfg.seed,
            **result.summary,
        })

    header = ["variant", "changes", "psnr_left", "psnr_right", "psnr_total",
              "ssim_left", "ssim_right", "ssim_total", "final_loss", "seed"]
    with open(out_csv, "w", newline="", encoding="utf-8") as f:
        writer = _csv.DictWriter(f, fieldnames=header)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in header})
    return rows


def cmd_ablate(args, extra):
    cfgs = build_configs(args.config, {**_collect_overrides(args.set), **extra})
    variants = parse_grid(args.grid)
    train_samples = load_dataset(args.data, split="train")
    try:
        eval_samples = load_dataset(args.data, split=args.split)
    except DataError:
        eval_samples = train_samples
    rows = run_ablation(variants, train_samples, eval_samples,
                        cfgs["model"], cfgs["train"], args.out)
    for row in rows:
        print(f"{row['variant']}: psnr_total={row['psnr_total']:.3f} "
              f"ssim_total={row['ssim_total']:.4f} loss={row['final_loss']:.6f}")
    print(args.out)
    return 0


def cmd_params(args, extra):
    if extra:
        raise UsageError(f"unexpected arguments: {sorted(extra)}")
    cfgs = build_configs(args.config, _collect_overrides(args.set))
    print(count_parameters(cfgs["model"]))
    return 0


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--set", action="append", metavar="NS.KEY=VALUE",
                   help="config override; may repeat")


def build_parser():
    parser = _Parser(prog="stereoirr",
                     description="stereo rain removal: data, training, "
                                 "inference, evaluation, ablations")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a stereo rain dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, required=True)
    p.add_argument("--test", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="derain one stereo pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--split", default="test")
    p.add_argument("--error-maps", default=None, dest="error_maps")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train a grid of config variants")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True, help="results CSV path")
    p.add_argument("--split", default="test")
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("params", help="report the parameter count of a config")
    _add_common(p)
    p.set_defaults(func=cmd_params)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        extra = _extract_dotted_flags(rest)
        return args.func(args, extra)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, DataError, CheckpointError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Flat ``key=value`` run configuration shared by every CLI verb."""
from __future__ import annotations

import math
from pathlib import Path

from .data import Dataset, load_cifar, load_image_folder, synthetic
from .encoder import EncoderConfig
from .pyramid import PyramidSpec
from .training import DEFAULT_DEPTHS, TrainConfig


class ConfigError(ValueError):
    pass


# key -> (default, description)
KEYS: dict[str, tuple[str, str]] = {
    "base_edge": ("64", "edge of the base image in pixels"),
    "patch_edge": ("8", "patch edge in pixels, shared by every level"),
    "stride": ("0", "patch stride in pixels; 0 means patch_edge"),
    "levels": ("full", "'full' pyramid or 'single' (base level only)"),
    "dim": ("128", "hidden width"),
    "depth": ("12", "number of encoder layers"),
    "heads": ("4", "attention heads"),
    "mlp_dim": ("512", "MLP hidden width"),
    "channels": ("3", "image channels"),
    "num_classes": ("10", "number of classes"),
    "pooling": ("gap", "'gap' (mean over tokens) or 'token' (class token)"),
    "base_norm_scale": ("auto", "norm of base-level position embeddings; 'auto' is sqrt(dim/2)"),
    "temperature": ("10000", "sincos2d temperature"),
    "model": ("retina-vit", "'retina-vit', 'baseline-vit' (one level) or 'vit' (direct patchify)"),
    "epochs": ("30", "training epochs"),
    "batch_size": ("64", "examples per step"),
    "peak_lr": ("0.001", "learning rate reached after warmup"),
    "warmup_steps": ("100", "linear warmup steps"),
    "weight_decay": ("0.05", "decoupled weight decay for matrices"),
    "beta1": ("0.9", "first-moment decay"),
    "beta2": ("0.999", "second-moment decay"),
    "adam_eps": ("1e-08", "optimizer epsilon"),
    "seed": ("0", "seed for init, shuffling, flips and synthetic data"),
    "augment_flip": ("true", "random horizontal flips during training"),
    "data": ("synthetic", "'synthetic', 'cifar:PATH[,PATH...]' or 'folder:DIR'"),
    "train_size": ("1000", "number of synthetic training images; 0 keeps all loaded images"),
    "eval_data": ("synthetic", "evaluation set, same syntax as data; 'none' to skip"),
    "eval_size": ("500", "number of synthetic evaluation images; 0 keeps all loaded images"),
    "ablation_depths": (",".join(map(str, DEFAULT_DEPTHS)), "comma-separated depths for ablate"),
    "probe_images": ("8", "images used by probe"),
    "probe_aggregate": ("column", "attention-weight aggregation: 'column' (per key) or 'row' (per query)"),
    "probe_norm": ("mean_abs", "vector magnitude: 'mean_abs' or 'l2'"),
}


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = value
    return out


def load(path=None, overrides=()) -> dict[str, str]:
    values = {k: d for k, (d, _) in KEYS.items()}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        values.update(parse_text(text))
    for item in overrides:
        values.update(parse_text(item))
    return values


def help_text() -> str:
    width = max(map(len, KEYS))
    lines = ["config keys (key=value, one per line):"]
    lines += [f"  {k:<{width}}  default {d!r:<14} {desc}" for k, (d, desc) in KEYS.items()]
    return "\n".join(lines)


def _int(values, key):
    try:
        return int(values[key])
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {values[key]!r}") from None


def _float(values, key):
    try:
        return float(values[key])
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {values[key]!r}") from None


def _bool(values, key):
    v = values[key].lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key} must be a boolean, got {values[key]!r}")


def pyramid_spec(values) -> PyramidSpec:
    base, patch, stride = _int(values, "base_edge"), _int(values, "patch_edge"), _int(values, "stride")
    try:
        if values["levels"] == "full":
            return PyramidSpec.full(base, patch, stride or None)
        if values["levels"] == "single":
            return PyramidSpec.single(base, patch, stride or None)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    raise ConfigError(f"levels must be 'full' or 'single', got {values['levels']!r}")


def encoder_config(values) -> EncoderConfig:
    scale = values["base_norm_scale"]
    try:
        return EncoderConfig(
            dim=_int(values, "dim"), depth=_int(values, "depth"), heads=_int(values, "heads"),
            mlp_dim=_int(values, "mlp_dim"), patch_edge=_int(values, "patch_edge"),
            channels=_int(values, "channels"), num_classes=_int(values, "num_classes"),
            pooling=values["pooling"],
            base_norm_scale=None if scale == "auto" else _float(values, "base_norm_scale"),
            temperature=_float(values, "temperature"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train_config(values) -> TrainConfig:
    try:
        return TrainConfig(
            spec=pyramid_spec(values), encoder=encoder_config(values),
            epochs=_int(values, "epochs"), batch_size=_int(values, "batch_size"),
            peak_lr=_float(values, "peak_lr"), warmup_steps=_int(values, "warmup_steps"),
            weight_decay=_float(values, "weight_decay"), seed=_int(values, "seed"),
            augment_flip=_bool(values, "augment_flip"),
            betas=(_float(values, "beta1"), _float(values, "beta2")), eps=_float(values, "adam_eps"),
            model=values["model"])
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def depths(values) -> list[int]:
    try:
        return [int(d) for d in values["ablation_depths"].split(",") if d.strip()]
    except ValueError:
        raise ConfigError(f"bad ablation_depths {values['ablation_depths']!r}") from None


def dataset(values, which: str = "data") -> Dataset | None:
    """Load the training (``which="data"``) or evaluation (``"eval_data"``) set."""
    source = values[which]
    size_key = "train_size" if which == "data" else "eval_size"
    size = _int(values, size_key)
    base = _int(values, "base_edge")
    if source == "none":
        return None
    if source == "synthetic":
        seed = _int(values, "seed") + (0 if which == "data" else 1_000_003)
        return synthetic(size or 1000, seed, _int(values, "num_classes"), base)
    kind, _, arg = source.partition(":")
    if kind == "cifar" and arg:
        ds = load_cifar(arg.split(","), base)
    elif kind == "folder" and arg:
        ds = load_image_folder(arg, base)
    else:
        raise ConfigError(f"{which} must be 'synthetic', 'none', 'cifar:PATH' or 'folder:DIR'")
    return ds.subset(slice(0, size)) if size else ds


def dump(values) -> str:
    return "".join(f"{k}={values[k]}\n" for k in KEYS)


def resolved_norm_scale(values) -> float:
    scale = values["base_norm_scale"]
    return math.sqrt(_int(values, "dim") / 2) if scale == "auto" else _float(values, "base_norm_scale")

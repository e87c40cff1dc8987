"""Image ingestion: CIFAR-10 binary records, image folders, synthetic data.

All loaders return a :class:`Dataset` of float64 images in ``[0, 1]`` with
shape ``(N, E, E, 3)`` and integer labels.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_EDGE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_EDGE * CIFAR_EDGE
IMAGE_SUFFIXES = {".png", ".ppm", ".pgm", ".pnm"}


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index])


def decode_cifar(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Parse CIFAR-10 binary records into uint8 ``(N, 32, 32, 3)`` and labels."""
    if len(data) % CIFAR_RECORD:
        raise DataError(f"size {len(data)} is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    pixels = rec[:, 1:].reshape(-1, 3, CIFAR_EDGE, CIFAR_EDGE).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(pixels), labels


def encode_cifar(pixels: np.ndarray, labels) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.shape[1:] != (CIFAR_EDGE, CIFAR_EDGE, 3):
        raise DataError(f"expected uint8 (N, 32, 32, 3), got {pixels.dtype} {pixels.shape}")
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise DataError("labels must fit in one byte")
    planar = pixels.transpose(0, 3, 1, 2).reshape(len(pixels), -1)
    return np.concatenate([labels.astype(np.uint8)[:, None], planar], axis=1).tobytes()


def load_cifar(paths, base_edge: int | None = None) -> Dataset:
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    chunks = []
    for path in paths:
        try:
            chunks.append(Path(path).read_bytes())
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc}") from exc
    pixels, labels = decode_cifar(b"".join(chunks))
    return Dataset(to_unit(pixels, base_edge), labels)


def load_image_folder(root, base_edge: int | None = None) -> Dataset:
    """Images under ``root/<class_name>/``; classes are numbered in sorted order."""
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DataError(f"no class folders under {root}")
    images, labels = [], []
    for label, name in enumerate(classes):
        for path in sorted((root / name).iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with Image.open(path) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
            except OSError as exc:
                raise DataError(f"cannot decode {path}: {exc}") from exc
            images.append(to_unit(arr[None], base_edge)[0])
            labels.append(label)
    if not images:
        raise DataError(f"no images found under {root}")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataError(f"images have differing shapes {sorted(shapes)}")
    return Dataset(np.stack(images), np.array(labels))


def to_unit(pixels: np.ndarray, base_edge: int | None = None) -> np.ndarray:
    """uint8 -> ``v / 255`` floats, optionally upscaled to ``base_edge``."""
    images = np.asarray(pixels, dtype=np.float64) / 255.0
    return images if base_edge is None else upscale(images, base_edge)


def upscale(images: np.ndarray, base_edge: int) -> np.ndarray:
    """Pixel replication by an integer factor; ``(B, E, E, C)``."""
    h, w = images.shape[1:3]
    if h != w:
        raise DataError(f"non-square images {h}x{w}")
    if base_edge == h:
        return images
    if base_edge % h:
        raise DataError(f"base_edge {base_edge} is not an integer multiple of image edge {h}")
    f = base_edge // h
    return images.repeat(f, axis=1).repeat(f, axis=2)


def synthetic_pixels(n: int, seed: int = 0, num_classes: int = 10, edge: int = CIFAR_EDGE) -> tuple[np.ndarray, np.ndarray]:
    """Seeded class-structured uint8 images.

    Class ``k`` is a sinusoidal grating with orientation ``pi * k / num_classes``
    and a class-specific colour tint. Each image gets a random phase, a random
    spatial frequency in ``[2, 4)`` cycles per image and additive Gaussian
    noise with standard deviation 0.1. Labels cycle ``0, 1, ..., num_classes - 1``
    so every class is balanced.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    yy, xx = np.meshgrid(np.arange(edge) / edge, np.arange(edge) / edge, indexing="ij")
    hues = np.linspace(0.0, 2 * np.pi, num_classes, endpoint=False)
    tints = 0.5 + 0.35 * np.stack([np.cos(hues), np.cos(hues + 2.1), np.cos(hues + 4.2)], axis=1)
    out = np.empty((n, edge, edge, 3), dtype=np.uint8)
    for i, k in enumerate(labels):
        theta = np.pi * k / num_classes
        freq = rng.uniform(2.0, 4.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        img = wave[..., None] * tints[k] + rng.normal(0.0, 0.1, size=(edge, edge, 3))
        out[i] = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    return out, labels


def synthetic(n: int, seed: int = 0, num_classes: int = 10, base_edge: int | None = None,
              edge: int = CIFAR_EDGE) -> Dataset:
    pixels, labels = synthetic_pixels(n, seed, num_classes, edge)
    return Dataset(to_unit(pixels, base_edge), labels)

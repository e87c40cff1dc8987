"""Image pyramid construction and multi-level patch extraction.

Images are ``numpy`` arrays of shape ``(height, width, channels)`` holding
values in ``[0, 1]``. Batched helpers take a leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


class PyramidError(ValueError):
    pass


def check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3:
        raise PyramidError(f"expected (H, W, C) image, got shape {image.shape}")
    h, w, _ = image.shape
    if h < 1 or w < 1:
        raise PyramidError("image must be at least 1x1")
    if not np.all(np.isfinite(image)):
        raise PyramidError("image contains non-finite values")
    return image


def plan_levels(base_edge: int, patch_edge: int) -> list[int]:
    """Edge lengths of the pyramid, largest first.

    The base edge is followed by every ``patch_edge * 2**k`` strictly below it,
    so each level stays divisible by the patch edge.

    >>> plan_levels(224, 16)
    [224, 128, 64, 32, 16]
    """
    if patch_edge < 1:
        raise PyramidError("patch_edge must be >= 1")
    if base_edge < patch_edge:
        raise PyramidError(f"base_edge {base_edge} smaller than patch_edge {patch_edge}")
    if base_edge % patch_edge:
        raise PyramidError(f"patch_edge {patch_edge} does not divide base_edge {base_edge}")
    levels = [base_edge]
    edge = patch_edge
    lower = []
    while edge < base_edge:
        lower.append(edge)
        edge *= 2
    levels.extend(sorted(lower, reverse=True))
    return levels


@dataclass(frozen=True)
class PyramidSpec:
    base_edge: int
    patch_edge: int
    stride: int
    levels: tuple[int, ...]

    def __post_init__(self):
        levels = tuple(int(e) for e in self.levels)
        object.__setattr__(self, "levels", levels)
        if self.patch_edge < 1 or self.stride < 1:
            raise PyramidError("patch_edge and stride must be >= 1")
        if self.stride > self.patch_edge or self.patch_edge % self.stride:
            raise PyramidError(f"stride {self.stride} must divide patch_edge {self.patch_edge}")
        if not levels or levels[0] != self.base_edge:
            raise PyramidError("first level must equal base_edge")
        if any(a <= b for a, b in zip(levels, levels[1:])):
            raise PyramidError(f"levels must be strictly descending: {levels}")
        if any(e % self.patch_edge for e in levels):
            raise PyramidError(f"every level must be divisible by patch_edge {self.patch_edge}")

    @classmethod
    def full(cls, base_edge: int, patch_edge: int, stride: int | None = None) -> "PyramidSpec":
        """The complete pyramid from ``plan_levels``."""
        return cls(base_edge, patch_edge, stride or patch_edge, tuple(plan_levels(base_edge, patch_edge)))

    @classmethod
    def single(cls, base_edge: int, patch_edge: int, stride: int | None = None) -> "PyramidSpec":
        """Base level only, i.e. plain ViT patching."""
        if base_edge % patch_edge:
            raise PyramidError(f"patch_edge {patch_edge} does not divide base_edge {base_edge}")
        return cls(base_edge, patch_edge, stride or patch_edge, (base_edge,))

    def grid_size(self, level_edge: int) -> int:
        return (level_edge - self.patch_edge) // self.stride + 1

    def level_counts(self) -> list[int]:
        return [self.grid_size(e) ** 2 for e in self.levels]

    def level_boundaries(self) -> list[int]:
        """Token indices where one level ends and the next begins."""
        return list(np.cumsum(self.level_counts())[:-1].tolist())

    def level_of_token(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.levels)), self.level_counts())


def total_token_count(spec: PyramidSpec) -> int:
    return sum(spec.level_counts())


@dataclass(frozen=True)
class Pyramid:
    spec: PyramidSpec
    images: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class PatchRecord:
    level_index: int
    grid_row: int
    grid_col: int
    pixels: np.ndarray = field(repr=False)
    rf_box: tuple[float, float, float]  # (top, left, edge) in base pixels

    @property
    def rf_edge(self) -> float:
        return self.rf_box[2]


@lru_cache(maxsize=64)
def _area_weights(in_edge: int, out_edge: int) -> np.ndarray:
    # overlap length of input pixel j with output cell i, unnormalised
    scale = in_edge / out_edge
    lo = np.arange(out_edge)[:, None] * scale
    hi = lo + scale
    j = np.arange(in_edge)[None, :]
    w = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None)
    w.setflags(write=False)
    return w


def _downscale_one(image: np.ndarray, target_edge: int) -> np.ndarray:
    h = image.shape[0]
    if h % target_edge == 0:
        f = h // target_edge
        return image.reshape(target_edge, f, target_edge, f, -1).mean(axis=(1, 3))
    weights = _area_weights(h, target_edge)
    rows = np.tensordot(weights, image, axes=(1, 0))  # (i, w, c)
    out = np.tensordot(rows, weights, axes=(1, 1)).transpose(0, 2, 1)
    return out / (h / target_edge) ** 2


def downscale_batch(images: np.ndarray, target_edge: int) -> np.ndarray:
    """Area-average resample ``(B, E, E, C)`` images to ``target_edge``.

    Images are processed one at a time so results do not depend on batch
    composition.
    """
    b, h, w, c = images.shape
    if h != w:
        raise PyramidError(f"non-square image {h}x{w}")
    if target_edge < 1:
        raise PyramidError("target_edge must be >= 1")
    if target_edge > h:
        raise PyramidError(f"cannot upscale {h} -> {target_edge}")
    if target_edge == h:
        return images.copy()
    out = np.stack([_downscale_one(im, target_edge) for im in images])
    return np.clip(out, 0.0, 1.0)


def downscale(image: np.ndarray, target_edge: int) -> np.ndarray:
    """Shrink a square image by exact box (area) averaging.

    Each output pixel is the mean of the base-image area it covers, with
    partially covered input pixels weighted by the covered fraction. For
    integer ratios this is the plain block mean.
    """
    image = check_image(image)
    return downscale_batch(image[None], target_edge)[0]


def build_pyramid(image: np.ndarray, spec: PyramidSpec) -> Pyramid:
    image = check_image(image)
    if image.shape[0] != image.shape[1]:
        raise PyramidError(f"non-square image {image.shape[:2]}")
    if image.shape[0] != spec.base_edge:
        raise PyramidError(f"image edge {image.shape[0]} != base_edge {spec.base_edge}")
    # every level comes straight from the base image
    images = [image] + [downscale(image, e) for e in spec.levels[1:]]
    return Pyramid(spec, tuple(images))


def rf_box(spec: PyramidSpec, level_edge: int, row: int, col: int) -> tuple[float, float, float]:
    ratio = spec.base_edge / level_edge
    return (row * spec.stride * ratio, col * spec.stride * ratio, spec.patch_edge * ratio)


def extract_patches(pyramid: Pyramid) -> list[PatchRecord]:
    """Flatten the pyramid into one patch sequence.

    Levels are visited base first, then by descending edge; patches within a
    level are row-major.
    """
    spec = pyramid.spec
    p, s = spec.patch_edge, spec.stride
    records = []
    for li, (edge, img) in enumerate(zip(spec.levels, pyramid.images)):
        n = spec.grid_size(edge)
        for r in range(n):
            for c in range(n):
                pix = img[r * s:r * s + p, c * s:c * s + p]
                pix.setflags(write=False)
                records.append(PatchRecord(li, r, c, pix, rf_box(spec, edge, r, c)))
    return records


def patchify(images: np.ndarray, patch_edge: int, stride: int) -> np.ndarray:
    """``(B, E, E, C)`` -> ``(B, n*n, patch_edge*patch_edge*C)``, row-major."""
    b, e, _, c = images.shape
    if stride == patch_edge:
        n = e // patch_edge
        x = images.reshape(b, n, patch_edge, n, patch_edge, c).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, n * n, patch_edge * patch_edge * c)
    win = np.lib.stride_tricks.sliding_window_view(images, (patch_edge, patch_edge), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (B, n, n, C, p, p)
    n = win.shape[1]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b, n * n, patch_edge * patch_edge * c)


def tokenize_batch(images: np.ndarray, spec: PyramidSpec) -> np.ndarray:
    """Pixel vectors for every pyramid patch of every image.

    Same order and content as ``extract_patches`` applied per image, returned
    as ``(B, N, patch_edge**2 * C)``.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1] != spec.base_edge or images.shape[2] != spec.base_edge:
        raise PyramidError(f"expected (B, {spec.base_edge}, {spec.base_edge}, C), got {images.shape}")
    parts = [patchify(images, spec.patch_edge, spec.stride)]
    for edge in spec.levels[1:]:
        parts.append(patchify(downscale_batch(images, edge), spec.patch_edge, spec.stride))
    return np.concatenate(parts, axis=1)


def token_rf_boxes(spec: PyramidSpec) -> list[tuple[float, float, float]]:
    boxes = []
    for edge in spec.levels:
        n = spec.grid_size(edge)
        boxes.extend(rf_box(spec, edge, r, c) for r in range(n) for c in range(n))
    return boxes

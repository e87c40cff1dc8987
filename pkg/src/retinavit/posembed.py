"""Sinusoidal 2-D position embeddings averaged over each patch's receptive field."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .pyramid import PatchRecord, PyramidSpec, token_rf_boxes


@dataclass(frozen=True)
class PosEmbedGrid:
    grid_h: int
    grid_w: int
    dim: int
    cell_edge: int
    vectors: np.ndarray = field(repr=False)  # (grid_h, grid_w, dim)


@dataclass(frozen=True)
class ScaledPosEmbed:
    vector: np.ndarray = field(repr=False)
    level_index: int
    norm_target: float


def sincos2d(grid_h: int, grid_w: int, dim: int, temperature: float = 10000.0,
             cell_edge: int = 1) -> PosEmbedGrid:
    """Fixed 2-D sin/cos embedding for every cell of a ``grid_h x grid_w`` grid.

    The vector for cell ``(y, x)`` is ``[sin(y w), cos(y w), sin(x w), cos(x w)]``
    with ``w_k = temperature ** (-k / (dim / 4))``, so every vector has norm
    ``sqrt(dim / 2)``.
    """
    if dim % 4:
        raise ValueError(f"dim must be divisible by 4, got {dim}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    quarter = dim // 4
    omega = temperature ** (-np.arange(quarter, dtype=np.float64) / quarter)
    y, x = np.meshgrid(np.arange(grid_h, dtype=np.float64), np.arange(grid_w, dtype=np.float64), indexing="ij")
    ya = y[..., None] * omega
    xa = x[..., None] * omega
    vectors = np.concatenate([np.sin(ya), np.cos(ya), np.sin(xa), np.cos(xa)], axis=-1)
    vectors.setflags(write=False)
    return PosEmbedGrid(grid_h, grid_w, dim, cell_edge, vectors)


def grid_for_spec(spec: PyramidSpec, dim: int, temperature: float = 10000.0) -> PosEmbedGrid:
    n = spec.base_edge // spec.patch_edge
    return sincos2d(n, n, dim, temperature, cell_edge=spec.patch_edge)


def _spans(start: float, length: float, cell_edge: float, n_cells: int) -> list[tuple[int, float]]:
    stop = start + length
    first = int(math.floor(start / cell_edge))
    last = min(int(math.ceil(stop / cell_edge)), n_cells)
    out = []
    for i in range(max(first, 0), last):
        overlap = min(stop, (i + 1) * cell_edge) - max(start, i * cell_edge)
        if overlap > 0:
            out.append((i, overlap))
    return out


def overlap_weights(rf_box: tuple[float, float, float], cell_edge: float,
                    grid_h: int, grid_w: int) -> dict[tuple[int, int], float]:
    """Fraction of ``rf_box`` (top, left, edge) falling inside each grid cell."""
    top, left, edge = rf_box
    rows = _spans(top, edge, cell_edge, grid_h)
    cols = _spans(left, edge, cell_edge, grid_w)
    total = sum(o for _, o in rows) * sum(o for _, o in cols)
    return {(r, c): (ro * co) / total for r, ro in rows for c, co in cols}


def norm_target(rf_edge: float, patch_edge: float, base_norm_scale: float) -> float:
    return base_norm_scale * math.sqrt(rf_edge / patch_edge)


def scaled_avg_posembed(patch: PatchRecord, grid: PosEmbedGrid, base_norm_scale: float) -> ScaledPosEmbed:
    """Area-weighted mean of the grid vectors under the patch, rescaled.

    The result has norm ``base_norm_scale * sqrt(rf_edge / patch_edge)``.
    """
    vec, target = _scaled_average(patch.rf_box, grid, base_norm_scale)
    vec.setflags(write=False)
    return ScaledPosEmbed(vec, patch.level_index, target)


def _scaled_average(box, grid: PosEmbedGrid, base_norm_scale: float) -> tuple[np.ndarray, float]:
    weights = overlap_weights(box, grid.cell_edge, grid.grid_h, grid.grid_w)
    v = np.zeros(grid.dim)
    for (r, c), w in weights.items():
        v += w * grid.vectors[r, c]
    length = np.linalg.norm(v)
    if length == 0.0:
        raise ValueError(f"average embedding for box {box} is zero; cannot rescale")
    target = norm_target(box[2], grid.cell_edge, base_norm_scale)
    return v * (target / length), target


def posembed_sequence(patches: list[PatchRecord], grid: PosEmbedGrid,
                      base_norm_scale: float) -> list[ScaledPosEmbed]:
    return [scaled_avg_posembed(p, grid, base_norm_scale) for p in patches]


@lru_cache(maxsize=32)
def posembed_table(spec: PyramidSpec, dim: int, base_norm_scale: float | None = None,
                   temperature: float = 10000.0) -> np.ndarray:
    """``(N, dim)`` positional embeddings in token order for ``spec``.

    ``base_norm_scale=None`` means ``sqrt(dim / 2)``, which makes base-level
    patches reproduce the plain sincos2d vectors.
    """
    if base_norm_scale is None:
        base_norm_scale = math.sqrt(dim / 2)
    grid = grid_for_spec(spec, dim, temperature)
    table = np.stack([_scaled_average(box, grid, base_norm_scale)[0] for box in token_rf_boxes(spec)])
    table.setflags(write=False)
    return table

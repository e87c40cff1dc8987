"""Flat binary checkpoint format.

Layout, all little-endian::

    magic     4 bytes  b"RVIT"
    version   u32      (1)
    kind      u32      0 = RetinaViT, 1 = plain ViT
    dim depth heads mlp_dim patch_edge channels num_classes pooling   u32 each
    base_edge stride n_levels   u32 each, then n_levels x u32 level edges
    base_norm_scale  f64  (NaN means the sqrt(dim / 2) default)
    temperature      f64
    n_tensors u32
    per tensor: name_len u32, name utf-8, rank u32, rank x u32 dims, float32 data

Parameters round-trip bit-exactly; position tables are rebuilt from the header.
"""
from __future__ import annotations

import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from .encoder import POOLINGS, EncoderConfig, RetinaViT, ViT
from .pyramid import PyramidSpec

MAGIC = b"RVIT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _u32(*values) -> bytes:
    return struct.pack(f"<{len(values)}I", *values)


def dumps(model: RetinaViT | ViT) -> bytes:
    cfg = model.config
    if isinstance(model, RetinaViT):
        kind, spec = 0, model.spec
        base_edge, stride, levels = spec.base_edge, spec.stride, spec.levels
    else:
        kind, base_edge, stride, levels = 1, model.base_edge, cfg.patch_edge, (model.base_edge,)
    parts = [MAGIC, _u32(VERSION, kind, cfg.dim, cfg.depth, cfg.heads, cfg.mlp_dim, cfg.patch_edge,
                         cfg.channels, cfg.num_classes, POOLINGS.index(cfg.pooling),
                         base_edge, stride, len(levels), *levels)]
    scale = math.nan if cfg.base_norm_scale is None else cfg.base_norm_scale
    parts.append(struct.pack("<dd", scale, cfg.temperature))
    params = list(model.named_parameters())
    parts.append(_u32(len(params)))
    for name, p in params:
        raw = name.encode()
        arr = p.detach().cpu().numpy().astype("<f4")
        parts.append(_u32(len(raw)) + raw + _u32(arr.ndim, *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def loads(data: bytes) -> RetinaViT | ViT:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    kind, dim, depth, heads, mlp_dim, patch_edge, channels, num_classes, pooling = r.u32(9)
    base_edge, stride, n_levels = r.u32(3)
    levels = [r.u32() for _ in range(n_levels)]
    scale, temperature = struct.unpack("<dd", r.take(16))
    cfg = EncoderConfig(dim=dim, depth=depth, heads=heads, mlp_dim=mlp_dim, patch_edge=patch_edge,
                        channels=channels, num_classes=num_classes, pooling=POOLINGS[pooling],
                        base_norm_scale=None if math.isnan(scale) else scale, temperature=temperature)
    if kind == 0:
        model = RetinaViT(cfg, PyramidSpec(base_edge, patch_edge, stride, tuple(levels)))
    elif kind == 1:
        model = ViT(cfg, base_edge)
    else:
        raise CheckpointError(f"unknown model kind {kind}")
    params = dict(model.named_parameters())
    n_tensors = r.u32()
    if n_tensors != len(params):
        raise CheckpointError(f"expected {len(params)} tensors, found {n_tensors}")
    for _ in range(n_tensors):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        dims = [r.u32() for _ in range(rank)]
        arr = np.frombuffer(r.take(4 * int(np.prod(dims, dtype=np.int64))), dtype="<f4").reshape(dims)
        if name not in params:
            raise CheckpointError(f"unexpected tensor {name!r}")
        if tuple(params[name].shape) != tuple(dims):
            raise CheckpointError(f"shape mismatch for {name}: {dims}")
        with torch.no_grad():
            params[name].copy_(torch.from_numpy(arr.copy()))
    if r.pos != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    return model


def atomic_write(path: str | os.PathLike, data: bytes | str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def save(model: RetinaViT | ViT, path: str | os.PathLike):
    atomic_write(path, dumps(model))


def load(path: str | os.PathLike) -> RetinaViT | ViT:
    return loads(Path(path).read_bytes())

"""Pre-norm transformer encoder over multi-level patch tokens."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .posembed import ScaledPosEmbed, posembed_table, sincos2d
from .pyramid import PatchRecord, PyramidSpec, patchify, tokenize_batch, total_token_count

POOLINGS = ("gap", "token")


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 384
    depth: int = 12
    heads: int = 6
    mlp_dim: int = 1536
    patch_edge: int = 16
    channels: int = 3
    num_classes: int = 1000
    pooling: str = "gap"
    base_norm_scale: float | None = None  # None -> sqrt(dim / 2)
    temperature: float = 10000.0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 4:
            raise ValueError("dim must be divisible by 4 for sincos2d")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")

    @property
    def patch_size(self) -> int:
        return self.patch_edge * self.patch_edge * self.channels


@dataclass
class LayerTrace:
    """Captured quantities of one encoder layer (leading batch axis)."""

    attention_weights: torch.Tensor  # (B, heads, N, N), post-softmax
    attention_output: torch.Tensor   # (B, N, dim)
    residual_sum: torch.Tensor       # (B, N, dim)


def _init_linear(layer: nn.Linear):
    nn.init.normal_(layer.weight, std=1.0 / math.sqrt(layer.in_features))
    nn.init.zeros_(layer.bias)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        h = self.heads

        def split(t):
            return t.view(b, n, h, d // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        logits = q @ k.transpose(-2, -1) / math.sqrt(d // h)
        logits = logits - logits.amax(dim=-1, keepdim=True)
        weights = logits.exp()
        weights = weights / weights.sum(dim=-1, keepdim=True)
        out = (weights @ v).transpose(1, 2).reshape(b, n, d)
        return self.o(out), weights


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.fc1 = nn.Linear(dim, mlp_dim)
        self.fc2 = nn.Linear(mlp_dim, dim)

    def forward(self, x, capture: bool = False):
        attn_out, weights = self.attn(self.norm1(x))
        u = x + attn_out
        out = u + self.fc2(F.gelu(self.fc1(self.norm2(u))))
        trace = LayerTrace(weights.detach(), attn_out.detach(), u.detach()) if capture else None
        return out, trace


def attention_layer(x: torch.Tensor, block: Block, capture: bool = False):
    """Run one pre-norm block; raises ``DivergenceError`` on non-finite output."""
    out, trace = block(x, capture)
    if not torch.isfinite(out).all():
        raise DivergenceError("non-finite activations in encoder layer")
    return out, trace


class Encoder(nn.Module):
    """Shared patch projection, transformer blocks, final norm and linear head."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.patch_projection = nn.Linear(config.patch_size, config.dim)
        self.blocks = nn.ModuleList(
            Block(config.dim, config.heads, config.mlp_dim) for _ in range(config.depth))
        self.norm = nn.LayerNorm(config.dim, eps=1e-6)
        self.head = nn.Linear(config.dim, config.num_classes)
        if config.pooling == "token":
            self.cls_token = nn.Parameter(torch.zeros(config.dim))
        else:
            self.register_parameter("cls_token", None)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                _init_linear(m)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        if self.cls_token is not None:
            nn.init.zeros_(self.cls_token)

    def embed(self, patches: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
        x = self.patch_projection(patches) + pos
        if self.cls_token is not None:
            x = torch.cat([x, self.cls_token.expand(x.shape[0], 1, -1)], dim=1)
        return x

    def encode(self, x: torch.Tensor, capture: bool = False):
        traces = []
        for block in self.blocks:
            x, trace = attention_layer(x, block, capture)
            traces.append(trace)
        x = self.norm(x)
        pooled = x[:, -1] if self.cls_token is not None else x.mean(dim=1)
        return self.head(pooled), (traces if capture else None)

    def forward_tokens(self, patches: torch.Tensor, pos: torch.Tensor, capture: bool = False):
        return self.encode(self.embed(patches, pos), capture)


class RetinaViT(nn.Module):
    """Encoder fed with patches from every pyramid level.

    ``forward`` takes pre-tokenized patches ``(B, N, P)`` from
    ``tokenize_batch``; ``forward_images`` does the tokenization.
    """

    def __init__(self, config: EncoderConfig, spec: PyramidSpec):
        super().__init__()
        if config.patch_edge != spec.patch_edge:
            raise ValueError("encoder and pyramid disagree on patch_edge")
        self.spec = spec
        self.encoder = Encoder(config)
        table = posembed_table(spec, config.dim, config.base_norm_scale, config.temperature)
        self.register_buffer("pos_embed", torch.tensor(table, dtype=torch.get_default_dtype()))

    @property
    def config(self) -> EncoderConfig:
        return self.encoder.config

    def prepare(self, images: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(tokenize_batch(images, self.spec), dtype=self.pos_embed.dtype)

    def forward(self, patches: torch.Tensor, capture: bool = False):
        return self.encoder.forward_tokens(patches, self.pos_embed, capture)

    def forward_images(self, images: np.ndarray, capture: bool = False):
        return self(self.prepare(images), capture)


class ViT(nn.Module):
    """Plain single-resolution ViT: reshape patchify plus the sincos2d grid."""

    def __init__(self, config: EncoderConfig, base_edge: int):
        super().__init__()
        self.base_edge = base_edge
        self.encoder = Encoder(config)
        n = base_edge // config.patch_edge
        grid = sincos2d(n, n, config.dim, config.temperature)
        pos = torch.tensor(grid.vectors.reshape(n * n, config.dim), dtype=torch.get_default_dtype())
        self.register_buffer("pos_embed", pos)

    @property
    def config(self) -> EncoderConfig:
        return self.encoder.config

    def prepare(self, images: np.ndarray) -> torch.Tensor:
        images = np.asarray(images, dtype=np.float64)
        p = self.config.patch_edge
        return torch.as_tensor(patchify(images, p, p), dtype=self.pos_embed.dtype)

    def forward(self, patches: torch.Tensor, capture: bool = False):
        return self.encoder.forward_tokens(patches, self.pos_embed, capture)

    def forward_images(self, images: np.ndarray, capture: bool = False):
        return self(self.prepare(images), capture)


def embed_tokens(patches: list[PatchRecord], posembeds: list[ScaledPosEmbed], encoder: Encoder) -> torch.Tensor:
    """Token matrix ``(N, dim)`` (``N + 1`` with a class token) for one image."""
    if len(patches) != len(posembeds):
        raise ValueError(f"{len(patches)} patches but {len(posembeds)} position embeddings")
    dtype = encoder.patch_projection.weight.dtype
    pix = np.stack([p.pixels.reshape(-1) for p in patches])
    if pix.shape[1] != encoder.config.patch_size:
        raise ValueError(f"patch has {pix.shape[1]} values, projection expects {encoder.config.patch_size}")
    pos = np.stack([e.vector for e in posembeds])
    with torch.no_grad():
        return encoder.embed(torch.as_tensor(pix, dtype=dtype)[None], torch.as_tensor(pos, dtype=dtype))[0]


def forward(image: np.ndarray, model: RetinaViT, capture: bool = False):
    """Logits ``(num_classes,)`` and optional per-layer traces for one image."""
    logits, traces = model.forward_images(np.asarray(image)[None], capture)
    return logits[0], traces


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    loss = F.cross_entropy(logits, labels)
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss.item()}")
    return loss


def loss_and_gradients(model: nn.Module, patches: torch.Tensor, labels) -> tuple[float, dict[str, torch.Tensor]]:
    """Mean cross-entropy over the batch and the gradient of every parameter."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.min() < 0 or labels.max() >= model.config.num_classes:
        raise ValueError("label out of range")
    model.zero_grad(set_to_none=False)
    logits, _ = model(patches)
    loss = cross_entropy(logits, labels)
    loss.backward()
    grads = {name: p.grad.detach().clone() for name, p in model.named_parameters()}
    return loss.item(), grads


def token_count(config: EncoderConfig, spec: PyramidSpec) -> int:
    return total_token_count(spec) + (config.pooling == "token")



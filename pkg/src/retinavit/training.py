"""Desk-scale training, evaluation and the depth ablation."""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import checkpoint
from .data import Dataset
from .encoder import DivergenceError, EncoderConfig, RetinaViT, ViT, cross_entropy
from .pyramid import PyramidSpec

log = logging.getLogger(__name__)

MODELS = ("retina-vit", "baseline-vit", "vit")
DEFAULT_DEPTHS = (2, 4, 6, 8, 10, 12)


def configure_threads(default: int | None = None):
    """Cap torch intra-op threads from ``RETINAVIT_THREADS``."""
    n = os.environ.get("RETINAVIT_THREADS", default)
    if n:
        torch.set_num_threads(int(n))


@dataclass(frozen=True)
class TrainConfig:
    spec: PyramidSpec
    encoder: EncoderConfig
    epochs: int = 30
    batch_size: int = 64
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.05
    seed: int = 0
    augment_flip: bool = True
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    model: str = "retina-vit"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")


def lr_at(step: int, total_steps: int, peak_lr: float, warmup_steps: int) -> float:
    """Linear warmup to ``peak_lr`` at ``warmup_steps``, then cosine to zero at the last step."""
    if step < warmup_steps:
        return peak_lr * (step + 1) / warmup_steps
    last = total_steps - 1
    if last <= warmup_steps:
        return peak_lr
    progress = min((step - warmup_steps) / (last - warmup_steps), 1.0)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def build_model(config: TrainConfig) -> RetinaViT | ViT:
    torch.manual_seed(config.seed)
    if config.model == "vit":
        return ViT(config.encoder, config.spec.base_edge)
    spec = config.spec
    if config.model == "baseline-vit":
        spec = PyramidSpec.single(spec.base_edge, spec.patch_edge, spec.stride)
    return RetinaViT(config.encoder, spec)


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.AdamW:
    decay = [p for p in model.parameters() if p.ndim >= 2]
    no_decay = [p for p in model.parameters() if p.ndim < 2]
    groups = [{"params": decay, "weight_decay": config.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=config.peak_lr, betas=config.betas, eps=config.eps)


@torch.no_grad()
def predict(model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    logits = [model.forward_images(images[i:i + batch_size])[0].double().numpy()
              for i in range(0, len(images), batch_size)]
    # np.argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(np.concatenate(logits), axis=1)


def evaluate(model, dataset: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, dataset.images, batch_size) == dataset.labels))


@dataclass
class TrainResult:
    model: RetinaViT | ViT
    log: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


def train(config: TrainConfig, dataset: Dataset, eval_dataset: Dataset | None = None,
          log_path=None, checkpoint_path=None, max_steps: int | None = None) -> TrainResult:
    """Train from scratch; returns the model and per-epoch log records.

    Data order and flips come from one generator seeded with ``config.seed``.
    On a non-finite loss the model is rolled back to the last completed epoch,
    saved to ``checkpoint_path`` if given, and ``DivergenceError`` is raised.
    """
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    if dataset.labels.min() < 0 or dataset.labels.max() >= config.encoder.num_classes:
        raise ValueError("labels outside [0, num_classes)")
    model = build_model(config)
    opt = make_optimizer(model, config)
    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = config.epochs * steps_per_epoch
    result = TrainResult(model)
    last_good = copy.deepcopy(model.state_dict())
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        model.train()
        order = rng.permutation(n)
        epoch_loss, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            images = dataset.images[idx]
            if config.augment_flip:
                flip = rng.random(len(idx)) < 0.5
                images = np.where(flip[:, None, None, None], images[:, :, ::-1], images)
            lr = lr_at(step, total, config.peak_lr, config.warmup_steps)
            for group in opt.param_groups:
                group["lr"] = lr
            try:
                logits, _ = model(model.prepare(images))
                loss = cross_entropy(logits, torch.as_tensor(dataset.labels[idx]))
            except DivergenceError:
                model.load_state_dict(last_good)
                if checkpoint_path is not None:
                    checkpoint.save(model, checkpoint_path)
                raise
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            result.step_losses.append(loss.item())
            epoch_loss += loss.item() * len(idx)
            seen += len(idx)
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        last_good = copy.deepcopy(model.state_dict())
        record = {
            "epoch": epoch,
            "train_loss": epoch_loss / seen,
            "eval_top1": evaluate(model, eval_dataset) if eval_dataset is not None else None,
            "lr": lr,
            "wall_seconds": time.perf_counter() - t0,
        }
        result.log.append(record)
        log.info("epoch %d loss %.4f eval %s", epoch, record["train_loss"], record["eval_top1"])
        if log_path is not None:
            checkpoint.atomic_write(log_path, "".join(json.dumps(r) + "\n" for r in result.log))
        if max_steps is not None and step >= max_steps:
            break
    if checkpoint_path is not None:
        checkpoint.save(model, checkpoint_path)
    return result


@dataclass
class AblationTable:
    rows: list[tuple[int, str, float]]
    metadata: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["depth", "model", "top1"])
        for depth, model, top1 in self.rows:
            writer.writerow([depth, model, f"{top1:.6f}"])
        return buf.getvalue()


def ablate_depth(base: TrainConfig, depths, dataset: Dataset, eval_dataset: Dataset | None = None) -> AblationTable:
    """Train a single-level baseline and a full-pyramid model at each depth.

    Both models at a depth share the seed and therefore the data order. Each
    configuration runs once.
    """
    eval_dataset = eval_dataset if eval_dataset is not None else dataset
    rows = []
    for depth in sorted(set(depths)):
        for kind in ("baseline-vit", "retina-vit"):
            cfg = replace(base, encoder=replace(base.encoder, depth=depth), model=kind)
            model = train(cfg, dataset).model
            top1 = evaluate(model, eval_dataset)
            log.info("depth %d %s top1 %.4f", depth, kind, top1)
            rows.append((depth, kind, top1))
    meta = {"train_size": len(dataset), "eval_size": len(eval_dataset), "seed": base.seed,
            "levels": list(base.spec.levels)}
    return AblationTable(rows, meta)

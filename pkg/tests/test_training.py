import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from retinavit import checkpoint
from retinavit.data import Dataset, synthetic
from retinavit.encoder import DivergenceError, EncoderConfig
from retinavit.pyramid import PyramidSpec
from retinavit.training import (
    TrainConfig,
    ablate_depth,
    build_model,
    evaluate,
    lr_at,
    make_optimizer,
    train,
)

SMALL = TrainConfig(
    spec=PyramidSpec.full(16, 4),
    encoder=EncoderConfig(dim=16, depth=2, heads=2, mlp_dim=32, patch_edge=4, num_classes=10),
    epochs=2, batch_size=8, peak_lr=1e-3, warmup_steps=3, seed=0)


@pytest.fixture(scope="module")
def tiny_data():
    return synthetic(24, seed=1, base_edge=16, edge=16)


def test_lr_schedule_shape():
    total, peak, warm = 100, 0.01, 10
    lrs = [lr_at(s, total, peak, warm) for s in range(total)]
    assert lrs[0] == pytest.approx(peak / warm)
    assert lrs[warm] == peak
    assert lrs[-1] <= 1e-8 * peak
    assert all(a <= b for a, b in zip(lrs[:warm], lrs[1:warm + 1]))
    assert all(a >= b for a, b in zip(lrs[warm:], lrs[warm + 1:]))


def test_lr_no_warmup():
    assert lr_at(0, 10, 1.0, 0) == 1.0
    assert lr_at(9, 10, 1.0, 0) <= 1e-8


def test_zero_gradient_step_is_noop():
    model = build_model(SMALL)
    opt = make_optimizer(model, replace(SMALL, weight_decay=0.0))
    before = [p.detach().clone() for p in model.parameters()]
    for p in model.parameters():
        p.grad = torch.zeros_like(p)
    opt.step()
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))


def test_train_is_deterministic(tiny_data):
    a = train(SMALL, tiny_data)
    b = train(SMALL, tiny_data)
    assert a.step_losses == b.step_losses
    assert [r["train_loss"] for r in a.log] == [r["train_loss"] for r in b.log]


def test_initial_loss_near_log_classes(tiny_data):
    result = train(replace(SMALL, epochs=1), tiny_data)
    assert abs(result.step_losses[0] - math.log(10)) < 0.1


def test_single_level_matches_direct_vit(tiny_data):
    cfg = replace(SMALL, epochs=5, batch_size=6)
    baseline = train(replace(cfg, model="baseline-vit"), tiny_data, max_steps=10)
    direct = train(replace(cfg, model="vit"), tiny_data, max_steps=10)
    assert len(baseline.step_losses) == 10
    assert baseline.step_losses == direct.step_losses
    for (n, a), (_, b) in zip(baseline.model.named_parameters(), direct.model.named_parameters()):
        assert torch.equal(a, b), n


def test_log_records(tiny_data, tmp_path):
    log_path = tmp_path / "log.jsonl"
    ckpt = tmp_path / "m.rvit"
    result = train(SMALL, tiny_data, eval_dataset=tiny_data, log_path=log_path, checkpoint_path=ckpt)
    lines = [json.loads(line) for line in log_path.read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [0, 1]
    assert set(lines[0]) == {"epoch", "train_loss", "eval_top1", "lr", "wall_seconds"}
    assert 0 <= lines[-1]["eval_top1"] <= 1
    loaded = checkpoint.load(ckpt)
    for a, b in zip(result.model.parameters(), loaded.parameters()):
        assert torch.equal(a, b)


def test_divergence_aborts_with_checkpoint(tiny_data, tmp_path):
    bad = Dataset(np.full_like(tiny_data.images, np.nan), tiny_data.labels)
    ckpt = tmp_path / "last.rvit"
    with pytest.raises(DivergenceError):
        train(SMALL, bad, checkpoint_path=ckpt)
    assert ckpt.exists()


def test_rejects_bad_labels(tiny_data):
    with pytest.raises(ValueError):
        train(SMALL, Dataset(tiny_data.images, tiny_data.labels + 10))


def test_evaluate_chance_with_zero_head():
    # zero head -> all logits tie -> class 0 -> exactly the class-0 share
    ds = synthetic(1000, seed=2, base_edge=16, edge=16)
    model = build_model(SMALL)
    assert evaluate(model, ds) == pytest.approx(0.1)


def test_evaluate_chance_with_random_head():
    ds = synthetic(1000, seed=3, base_edge=16, edge=16)
    ds = Dataset(ds.images, np.random.default_rng(0).permutation(ds.labels))
    model = build_model(SMALL)
    with torch.no_grad():
        model.encoder.head.weight.normal_()
    assert abs(evaluate(model, ds) - 0.1) <= 0.05


def test_evaluate_single_example():
    ds = synthetic(1, seed=0, base_edge=16, edge=16)
    model = build_model(SMALL)
    with torch.no_grad():
        model.encoder.head.bias[ds.labels[0]] = 1.0
    assert evaluate(model, ds) == 1.0


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate(build_model(SMALL), Dataset(np.zeros((0, 16, 16, 3)), []))


def test_ablation_table(tiny_data):
    table = ablate_depth(replace(SMALL, epochs=1), [2, 1], tiny_data)
    assert [(d, m) for d, m, _ in table.rows] == [
        (1, "baseline-vit"), (1, "retina-vit"), (2, "baseline-vit"), (2, "retina-vit")]
    assert all(0 <= acc <= 1 for *_, acc in table.rows)
    assert table.to_csv().splitlines()[0] == "depth,model,top1"

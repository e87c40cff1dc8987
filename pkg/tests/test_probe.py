import json

import numpy as np
import pytest
import torch
from conftest import tiny_model

from retinavit.encoder import LayerTrace
from retinavit.probe import (
    ProbeAccumulator,
    ProbeReport,
    ReportError,
    finalize,
    magnitudes_from_trace,
    plot_report,
    run_probe,
    validate_report,
)
from retinavit.pyramid import PyramidSpec


def random_trace(rng, n=3, heads=2, dim=4, batch=None):
    lead = () if batch is None else (batch,)
    logits = rng.normal(size=lead + (heads, n, n))
    w = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    return LayerTrace(torch.from_numpy(w), torch.from_numpy(rng.normal(size=lead + (n, dim))),
                      torch.from_numpy(rng.normal(size=lead + (n, dim))))


def naive_magnitudes(trace):
    a = trace.attention_weights.numpy()
    o = trace.attention_output.numpy()
    r = trace.residual_sum.numpy()
    heads, n, _ = a.shape
    w = []
    for j in range(n):
        total = 0.0
        for h in range(heads):
            for i in range(n):
                total += abs(a[h, i, j])
        w.append(total / (heads * n))
    s = [sum(abs(v) for v in o[t]) / o.shape[1] for t in range(n)]
    rr = [sum(abs(v) for v in r[t]) / r.shape[1] for t in range(n)]
    return np.array(w), np.array(s), np.array(rr)


def test_uniform_attention():
    n = 4
    trace = LayerTrace(torch.full((2, n, n), 1 / n), torch.zeros(n, 3), torch.ones(n, 3))
    w, s, r = magnitudes_from_trace(trace)
    np.testing.assert_allclose(w, 1 / n)
    np.testing.assert_array_equal(s, 0.0)
    np.testing.assert_array_equal(r, 1.0)


def test_zero_output_residual_is_input_magnitude():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4))
    trace = LayerTrace(torch.full((1, 3, 3), 1 / 3), torch.zeros(3, 4), torch.from_numpy(x))
    _, s, r = magnitudes_from_trace(trace)
    np.testing.assert_array_equal(s, 0.0)
    np.testing.assert_allclose(r, np.abs(x).mean(axis=1))


@pytest.mark.parametrize("seed", range(3))
def test_magnitudes_match_double_loop(seed):
    trace = random_trace(np.random.default_rng(seed))
    for got, want in zip(magnitudes_from_trace(trace), naive_magnitudes(trace)):
        np.testing.assert_allclose(got, want, atol=1e-7)


def test_row_and_l2_flags():
    trace = random_trace(np.random.default_rng(4))
    w, s, _ = magnitudes_from_trace(trace, aggregate="row", norm="l2")
    np.testing.assert_allclose(w, 1 / 3, atol=1e-12)
    np.testing.assert_allclose(s, np.linalg.norm(trace.attention_output.numpy(), axis=1))
    with pytest.raises(ValueError):
        magnitudes_from_trace(trace, aggregate="diag")


def test_weight_magnitudes_sum_to_one():
    trace = random_trace(np.random.default_rng(5), n=7, batch=4)
    w, _, _ = magnitudes_from_trace(trace)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)


def test_single_example_means():
    rng = np.random.default_rng(6)
    traces = [random_trace(rng, n=5) for _ in range(2)]
    acc = ProbeAccumulator(2, 5).accumulate(traces)
    report = finalize(acc, PyramidSpec(8, 4, 4, (8, 4)))
    for layer, t in enumerate(traces):
        np.testing.assert_allclose(report.means[layer], np.stack(magnitudes_from_trace(t)))
    assert report.count == 1


def test_empty_accumulator_rejected():
    with pytest.raises(ValueError):
        finalize(ProbeAccumulator(2, 5), PyramidSpec(8, 4, 4, (8, 4)))


def test_trace_count_mismatch():
    with pytest.raises(ValueError):
        ProbeAccumulator(2, 3).accumulate([random_trace(np.random.default_rng(0))])


def test_merge_equals_streaming():
    rng = np.random.default_rng(7)
    stream = [[random_trace(rng, n=5, batch=2) for _ in range(3)] for _ in range(6)]
    whole = ProbeAccumulator(3, 5)
    left, right = ProbeAccumulator(3, 5), ProbeAccumulator(3, 5)
    for i, traces in enumerate(stream):
        whole.accumulate(traces)
        (left if i < 2 else right).accumulate(traces)
    merged = left.merge(right)
    assert merged.count == whole.count == 12
    np.testing.assert_allclose(merged.sums, whole.sums, atol=1e-9)


def test_boundaries_224():
    spec = PyramidSpec.full(224, 16)
    acc = ProbeAccumulator(12, 281)
    acc.sums += 1.0
    acc.count = 1
    report = finalize(acc, spec)
    assert report.boundaries == [196, 260, 276, 280]
    assert report.means.shape == (12, 3, 281)
    assert report.level_means.shape == (12, 3, 5)


def test_single_level_has_no_boundaries():
    spec = PyramidSpec.single(32, 8)
    acc = ProbeAccumulator(1, 16)
    acc.count = 1
    assert finalize(acc, spec).boundaries == []


def test_run_probe_excludes_class_token():
    model = tiny_model(0, pooling="token", dtype=torch.float32)
    acc = run_probe(model, np.random.default_rng(0).random((3, 8, 8, 3)), batch_size=2)
    assert acc.positions == 5 and acc.count == 3
    report = finalize(acc, model.spec)
    assert report.means.shape == (2, 3, 5)


def test_report_json_and_csv_round_trip():
    model = tiny_model(1, dtype=torch.float32)
    acc = run_probe(model, np.random.default_rng(1).random((4, 8, 8, 3)))
    report = finalize(acc, model.spec, {"note": "test"})
    d = json.loads(report.to_json())
    validate_report(d)
    again = ProbeReport.from_dict(d)
    np.testing.assert_array_equal(again.means, report.means)
    rows = report.to_csv().strip().split("\n")
    assert len(rows) == 1 + 2 * 3
    assert rows[0].split(",")[:3] == ["layer", "quantity", "p0"]
    np.testing.assert_allclose(np.array(d["layers"])[:, 0].sum(-1), 1.0, atol=1e-5)


def test_validate_rejects_bad_boundaries():
    d = {"config": {}, "count": 1, "boundaries": [3, 2], "quantities": ["attention_weights",
         "attention_scores", "residual_sum"], "layers": [[[0.0] * 5] * 3], "level_means": [], "metadata": {}}
    with pytest.raises(ReportError):
        validate_report(d)


def test_plot_report_svgs():
    acc = ProbeAccumulator(2, 5)
    acc.sums += np.linspace(0, 1, 30).reshape(2, 3, 5)
    acc.count = 1
    svgs = plot_report(finalize(acc, PyramidSpec(8, 4, 4, (8, 4))))
    assert list(svgs) == ["attention_weights", "attention_scores", "residual_sum"]
    assert all(s.lstrip().startswith("<?xml") and "<svg" in s for s in svgs.values())

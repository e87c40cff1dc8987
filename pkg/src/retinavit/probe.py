"""Per-position magnitude probes of attention weights, attention outputs and residual sums."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .pyramid import PyramidSpec, total_token_count

QUANTITIES = ("attention_weights", "attention_scores", "residual_sum")

REPORT_SCHEMA = {
    "type": "object",
    "required": ["config", "count", "boundaries", "layers", "quantities", "level_means", "metadata"],
    "properties": {
        "config": {"type": "object"},
        "count": {"type": "integer", "minimum": 1},
        "boundaries": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "quantities": {"type": "array", "items": {"enum": list(QUANTITIES)}, "minItems": 3, "maxItems": 3},
        "layers": {
            "type": "array", "minItems": 1,
            "items": {"type": "array", "minItems": 3, "maxItems": 3,
                      "items": {"type": "array", "minItems": 1, "items": {"type": "number"}}},
        },
        "level_means": {"type": "array"},
        "metadata": {"type": "object"},
    },
}


def magnitudes_from_trace(trace, aggregate: str = "column", norm: str = "mean_abs", positions: int | None = None):
    """Per-position magnitudes of the three probed quantities.

    ``aggregate="column"`` averages ``|A[h, i, j]|`` over heads and queries so
    entry ``j`` is the attention received by key ``j``; ``"row"`` averages over
    heads and keys instead. ``norm`` is ``"mean_abs"`` (mean absolute component)
    or ``"l2"`` for the two vector quantities. Works with or without a leading
    batch axis. ``positions`` keeps only the first that many tokens, which is
    how a trailing class token is dropped.
    """
    weights = _np(trace.attention_weights)
    scores = _np(trace.attention_output)
    resid = _np(trace.residual_sum)
    if aggregate == "column":
        w = np.abs(weights).mean(axis=(-3, -2))
    elif aggregate == "row":
        w = np.abs(weights).mean(axis=(-3, -1))
    else:
        raise ValueError(f"unknown aggregate {aggregate!r}")
    if norm == "mean_abs":
        s, r = np.abs(scores).mean(axis=-1), np.abs(resid).mean(axis=-1)
    elif norm == "l2":
        s, r = np.linalg.norm(scores, axis=-1), np.linalg.norm(resid, axis=-1)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    if positions is not None:
        w, s, r = w[..., :positions], s[..., :positions], r[..., :positions]
    return w, s, r


def _np(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    return np.asarray(t, dtype=np.float64)


@dataclass
class ProbeAccumulator:
    """Running sums over examples; ``sums`` is ``(depth, 3, positions)``."""

    depth: int
    positions: int
    aggregate: str = "column"
    norm: str = "mean_abs"
    sums: np.ndarray = field(default=None, repr=False)
    count: int = 0

    def __post_init__(self):
        if self.sums is None:
            self.sums = np.zeros((self.depth, 3, self.positions))

    def accumulate(self, traces) -> "ProbeAccumulator":
        """Add one example's (or one batch's) traces, one per layer."""
        if len(traces) != self.depth:
            raise ValueError(f"expected {self.depth} layer traces, got {len(traces)}")
        added = None
        for layer, trace in enumerate(traces):
            w, s, r = magnitudes_from_trace(trace, self.aggregate, self.norm, self.positions)
            if w.shape[-1] != self.positions:
                raise ValueError(f"trace has {w.shape[-1]} positions, expected {self.positions}")
            stacked = np.stack([w, s, r], axis=-2)
            if stacked.ndim == 2:
                stacked = stacked[None]
            self.sums[layer] += stacked.sum(axis=0)
            added = stacked.shape[0]
        self.count += added
        return self

    def merge(self, other: "ProbeAccumulator") -> "ProbeAccumulator":
        if (other.depth, other.positions, other.aggregate, other.norm) != (
                self.depth, self.positions, self.aggregate, self.norm):
            raise ValueError("cannot merge accumulators with different shapes or settings")
        return ProbeAccumulator(self.depth, self.positions, self.aggregate, self.norm,
                                self.sums + other.sums, self.count + other.count)


def accumulate(acc: ProbeAccumulator, traces) -> ProbeAccumulator:
    return acc.accumulate(traces)


@dataclass
class ProbeReport:
    means: np.ndarray  # (depth, 3, positions)
    boundaries: list[int]
    level_means: np.ndarray  # (depth, 3, levels)
    count: int
    config: dict
    metadata: dict

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "count": self.count,
            "boundaries": self.boundaries,
            "quantities": list(QUANTITIES),
            "layers": self.means.tolist(),
            "level_means": self.level_means.tolist(),
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "quantity"] + [f"p{i}" for i in range(self.means.shape[2])])
        for layer, rows in enumerate(self.means):
            for name, row in zip(QUANTITIES, rows):
                writer.writerow([layer, name] + [repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeReport":
        validate_report(d)
        return cls(np.asarray(d["layers"], dtype=np.float64), list(d["boundaries"]),
                   np.asarray(d["level_means"], dtype=np.float64), d["count"], d["config"], d["metadata"])


def finalize(acc: ProbeAccumulator, spec: PyramidSpec, config: dict | None = None) -> ProbeReport:
    if acc.count < 1:
        raise ValueError("no examples accumulated")
    if acc.positions != total_token_count(spec):
        raise ValueError(f"accumulator has {acc.positions} positions, spec has {total_token_count(spec)}")
    means = acc.sums / acc.count
    if not np.all(np.isfinite(means)):
        raise ValueError("non-finite probe means")
    edges = [0] + list(np.cumsum(spec.level_counts()))
    level_means = np.stack([means[..., a:b].mean(axis=-1) for a, b in zip(edges, edges[1:])], axis=-1)
    metadata = {
        "weight_aggregation": acc.aggregate,
        "magnitude": acc.norm,
        "levels": list(spec.levels),
        "note": "attention-weight magnitudes aggregate over heads and "
                + ("queries (attention received per key)" if acc.aggregate == "column" else "keys (per query)"),
    }
    return ProbeReport(means, spec.level_boundaries(), level_means, acc.count, dict(config or {}), metadata)


class ReportError(ValueError):
    pass


def validate_report(d: dict):
    """Raise ``ReportError`` unless ``d`` is a well-formed probe report."""
    import jsonschema

    try:
        jsonschema.validate(d, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ReportError(exc.message) from None
    n = len(d["layers"][0][0])
    if any(len(q) != n for layer in d["layers"] for q in layer):
        raise ReportError("ragged position arrays")
    b = d["boundaries"]
    if any(x >= y for x, y in zip(b, b[1:])) or (b and b[-1] >= n):
        raise ReportError("boundaries must be strictly increasing and inside the array")


@torch.no_grad()
def run_probe(model, images: np.ndarray, batch_size: int = 8, aggregate: str = "column",
              norm: str = "mean_abs") -> ProbeAccumulator:
    """Forward ``images`` through ``model`` and accumulate layer traces."""
    cfg = model.config
    positions = model.pos_embed.shape[0]
    acc = ProbeAccumulator(cfg.depth, positions, aggregate, norm)
    model.eval()
    for start in range(0, len(images), batch_size):
        _, traces = model.forward_images(images[start:start + batch_size], capture=True)
        acc.accumulate(traces)
    return acc


def plot_report(report: ProbeReport) -> dict[str, str]:
    """One SVG document per quantity; layers stacked top (first) to bottom (last)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    depth, _, n = report.means.shape
    out = {}
    for qi, name in enumerate(QUANTITIES):
        fig, axes = plt.subplots(depth, 1, figsize=(8, 0.9 * depth + 0.8), sharex=True, squeeze=False)
        for layer in range(depth):
            ax = axes[layer, 0]
            ax.plot(np.arange(n), report.means[layer, qi], lw=0.8, color="black")
            for b in report.boundaries:
                ax.axvline(b - 0.5, color="red", lw=0.8)
                ax.plot([b - 0.5], [0], marker="^", color="red", transform=ax.get_xaxis_transform(), clip_on=False)
            ax.set_ylabel(f"L{layer}", rotation=0, labelpad=14, fontsize=7)
            ax.tick_params(labelsize=6)
        axes[0, 0].set_title(name.replace("_", " "))
        axes[-1, 0].set_xlabel("token position")
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg")
        plt.close(fig)
        out[name] = buf.getvalue()
    return out

"""Brute-force reference computations used by the test suite.

Nothing here calls into the optimized paths; only inputs (grids, parameter
arrays, loss callables) are shared.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class BudgetExceeded(ValueError):
    pass


@dataclass(frozen=True)
class OracleBudget:
    max_tokens: int = 16
    max_dim: int = 16
    max_pixels: int = 64 * 64
    max_params: int = 20000


BUDGET = OracleBudget()


def naive_backfill_average(rf_box, vectors: np.ndarray, cell_edge: int, budget: OracleBudget = BUDGET) -> np.ndarray:
    """Mean over the box of a per-pixel field where each pixel holds its cell's vector.

    ``vectors`` is ``(grid_h, grid_w, D)``; ``rf_box`` is integer ``(top, left, edge)``.
    """
    gh, gw, dim = vectors.shape
    h, w = gh * cell_edge, gw * cell_edge
    if h * w > budget.max_pixels or dim > budget.max_dim:
        raise BudgetExceeded(f"{h}x{w} field of dim {dim} exceeds oracle budget")
    field = np.empty((h, w, dim))
    for y in range(h):
        for x in range(w):
            field[y, x] = vectors[y // cell_edge, x // cell_edge]
    top, left, edge = (int(v) for v in rf_box)
    if top < 0 or left < 0 or top + edge > h or left + edge > w:
        raise ValueError(f"box {rf_box} outside {h}x{w} field")
    total = np.zeros(dim)
    for y in range(top, top + edge):
        for x in range(left, left + edge):
            total += field[y, x]
    return total / (edge * edge)


def _matvec(x, weight, bias):
    # y[o] = sum_i W[o, i] x[i] + b[o], torch Linear layout
    out = []
    for o in range(len(bias)):
        acc = bias[o]
        for i in range(len(x)):
            acc += weight[o][i] * x[i]
        out.append(acc)
    return out


def naive_attention(x: np.ndarray, params: dict, heads: int, budget: OracleBudget = BUDGET):
    """Loop-level multi-head attention in double precision.

    ``params`` holds ``q/k/v/o`` weights and biases in ``torch.nn.Linear``
    layout (``"q.weight"``, ``"q.bias"``, ...). Returns the output projection
    ``(N, dim)`` and the post-softmax weights ``(heads, N, N)``.
    """
    x = np.asarray(x, dtype=np.float64)
    n, dim = x.shape
    if n > budget.max_tokens or dim > budget.max_dim:
        raise BudgetExceeded(f"{n} tokens of dim {dim} exceeds oracle budget")
    p = {k: np.asarray(v, dtype=np.float64).tolist() for k, v in params.items()}
    q = [_matvec(x[t], p["q.weight"], p["q.bias"]) for t in range(n)]
    k = [_matvec(x[t], p["k.weight"], p["k.bias"]) for t in range(n)]
    v = [_matvec(x[t], p["v.weight"], p["v.bias"]) for t in range(n)]
    hd = dim // heads
    weights = np.zeros((heads, n, n))
    concat = [[0.0] * dim for _ in range(n)]
    for h in range(heads):
        sl = range(h * hd, (h + 1) * hd)
        for i in range(n):
            logits = []
            for j in range(n):
                logits.append(sum(q[i][c] * k[j][c] for c in sl) / math.sqrt(hd))
            top = max(logits)
            exps = [math.exp(a - top) for a in logits]
            z = sum(exps)
            for j in range(n):
                weights[h, i, j] = exps[j] / z
            for c in sl:
                concat[i][c] = sum(weights[h, i, j] * v[j][c] for j in range(n))
    out = np.array([_matvec(concat[t], p["o.weight"], p["o.bias"]) for t in range(n)])
    return out, weights


def finite_difference_grads(loss_fn, params: dict[str, np.ndarray], eps: float = 1e-4,
                            budget: OracleBudget = BUDGET) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn(params) -> float`` for every scalar parameter."""
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    if sum(np.size(v) for v in params.values()) > budget.max_params:
        raise BudgetExceeded("too many parameters for finite differences")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn(work)
            flat[i] = orig - eps
            down = loss_fn(work)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
        grads[name] = g
    return grads

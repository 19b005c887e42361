"""Choosing which hidden units a client uploads.

Scores are per output unit of every hidden layer; the output layer has no
score (``None``) and is always uploaded. A unit's score covers its incoming
weight row and bias.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .model import LayeredModel, SubModelSpec, UnitMask

STRATEGIES = ("feddd", "random", "max", "delta", "ordered")
EPS_DIV = 1e-8


class DropoutRangeError(ValueError):
    pass


def coverage_table(specs: Sequence[SubModelSpec], global_dims: Sequence[int]) -> list[np.ndarray]:
    """Fraction of clients whose sub-model contains each global hidden unit."""
    if not specs:
        raise ValueError("coverage needs at least one client")
    hidden = list(global_dims[1:-1])
    table = []
    for l, width in enumerate(hidden):
        idx = np.arange(width)
        covered = np.zeros(width)
        for spec in specs:
            spec.validate(global_dims)
            covered += idx < spec.hidden[l]
        table.append(covered / len(specs))
    return table


def _group_norms(model: LayeredModel) -> list[np.ndarray]:
    out = []
    for w, b in zip(model.weights, model.biases):
        sq = (w**2).sum(axis=1)
        if b is not None:
            sq = sq + b**2
        out.append(np.sqrt(sq))
    return out


def _clamp(w: np.ndarray, eps: float) -> np.ndarray:
    sign = np.where(w < 0, -1.0, 1.0)
    return np.where(np.abs(w) < eps, sign * eps, w)


def importance(
    before: LayeredModel,
    after: LayeredModel,
    coverage: Sequence[np.ndarray] | None = None,
    eps_div: float = EPS_DIV,
) -> list[np.ndarray | None]:
    """Per-unit importance ``|| dW * (W + dW) / W ||`` over the unit's group.

    With ``coverage`` (heterogeneous clients) each score is divided by the
    unit's coverage rate. Denominators smaller than ``eps_div`` in magnitude
    are clamped to ``eps_div`` with the sign kept.
    """
    if before.shapes != after.shapes:
        raise ValueError("models before and after training differ in shape")
    delta = after - before
    ratio = after.map(lambda a, w: a / _clamp(w, eps_div), before)
    scores: list[np.ndarray | None] = list(_group_norms(delta * ratio))
    scores[-1] = None
    if coverage is not None:
        for l in range(len(scores) - 1):
            width = scores[l].shape[0]
            cr = np.asarray(coverage[l][:width], dtype=np.float64)
            scores[l] = scores[l] / cr
    return scores


def strategy_scores(
    kind: str,
    before: LayeredModel,
    after: LayeredModel,
    coverage: Sequence[np.ndarray] | None = None,
    seed: int = 0,
) -> list[np.ndarray | None]:
    """Ranking scores for each selection strategy (higher is kept first)."""
    if kind == "feddd":
        return importance(before, after, coverage)
    if kind == "max":
        scores = _group_norms(after)
    elif kind == "delta":
        scores = _group_norms(after - before)
    elif kind == "ordered":
        scores = [-np.arange(w.shape[0], dtype=np.float64) for w in after.weights]
    elif kind == "random":
        rng = np.random.default_rng(seed)
        scores = [rng.permutation(w.shape[0]).astype(np.float64) for w in after.weights]
    else:
        raise ValueError(f"unknown selection strategy {kind!r}; choose from {STRATEGIES}")
    out: list[np.ndarray | None] = list(scores)
    out[-1] = None
    return out


def layer_quota(n_units: int, dropout: float) -> int:
    """Units kept in a layer: ``n_units * (1 - dropout)`` rounded half up."""
    return int(math.floor(n_units * (1.0 - dropout) + 0.5 + 1e-9))


def select_mask(scores: Sequence[np.ndarray | None], dropout: float) -> UnitMask:
    """Keep the top-quota units of every scored layer.

    Ties go to the lower unit index. Unscored layers are kept whole.
    """
    if not 0.0 <= dropout <= 1.0 or math.isnan(dropout):
        raise DropoutRangeError(f"dropout rate {dropout} outside [0, 1]")
    layers: list[np.ndarray | None] = []
    for s in scores:
        if s is None:
            layers.append(None)
            continue
        s = np.asarray(s, dtype=np.float64)
        keep = layer_quota(s.size, dropout)
        order = np.argsort(-s, kind="stable")
        bits = np.zeros(s.size, dtype=bool)
        bits[order[:keep]] = True
        layers.append(bits)
    return UnitMask(layers)


def hidden_dropout(dropout: float, total_params: int, exempt_params: int) -> float:
    """Hidden-layer rate that makes the upload track ``total * (1 - dropout)``
    when ``exempt_params`` (the output layer) are always sent."""
    droppable = total_params - exempt_params
    if droppable <= 0:
        return 0.0
    return min(1.0, dropout * total_params / droppable)

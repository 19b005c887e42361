"""Masked weighted aggregation and model redistribution."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import LayeredModel


@dataclass(frozen=True)
class Upload:
    values: LayeredModel  # global coordinates
    mask: LayeredModel  # 0/1, global coordinates
    n_samples: float


@dataclass(frozen=True)
class BroadcastPolicy:
    period: int = 5

    def __post_init__(self) -> None:
        if self.period < 1:
            raise ValueError("broadcast period must be >= 1")

    def is_full(self, round_idx: int) -> bool:
        if round_idx < 1:
            raise ValueError("rounds are numbered from 1")
        return round_idx % self.period == 0


def aggregate(
    uploads: Sequence[Upload],
    previous: LayeredModel,
    equal_weights: bool = False,
) -> LayeredModel:
    """Per-coordinate weighted mean over the clients that uploaded it.

    Coordinates no client uploaded keep their value from ``previous``.
    Clients are reduced in the order given (ascending client id).
    """
    if not uploads:
        raise ValueError("cannot aggregate an empty upload set")
    if not equal_weights and sum(u.n_samples for u in uploads) <= 0:
        raise ValueError("total sample weight must be positive")
    prev = previous.flatten()
    weights = [1.0 if equal_weights else float(up.n_samples) for up in uploads]
    masks = [up.mask.flatten() for up in uploads]
    den = np.zeros_like(prev)
    for w, m in zip(weights, masks):
        den += w * m
    covered = den > 0
    safe = np.where(covered, den, 1.0)
    # Normalised weights first, so a lone contributor is copied exactly.
    out = np.zeros_like(prev)
    for w, m, up in zip(weights, masks, uploads):
        out += (w * m / safe) * up.values.flatten()
    out[~covered] = prev[~covered]
    return LayeredModel.from_flat(out, previous.shapes)


def fedavg_mean(models: Sequence[LayeredModel], n_samples: Sequence[float]) -> LayeredModel:
    """Plain sample-weighted average, reduced in list order."""
    total = 0.0
    for m in n_samples:
        total += float(m)
    out = np.zeros(models[0].n_params)
    for model, m in zip(models, n_samples):
        out += (float(m) / total) * model.flatten()
    return LayeredModel.from_flat(out, models[0].shapes)


@dataclass
class Payload:
    values: LayeredModel
    full: bool
    n_params: int


def broadcast(global_model: LayeredModel, mask: LayeredModel, round_idx: int, policy: BroadcastPolicy) -> Payload:
    """Full model on every ``policy.period``-th round, else the client's masked slice.

    ``global_model`` and ``mask`` are in the client's own (sub-model) coordinates.
    """
    if policy.is_full(round_idx):
        return Payload(global_model.copy(), True, global_model.n_params)
    return Payload(global_model * mask, False, int(np.count_nonzero(mask.flatten())))


def local_update(trained: LayeredModel, payload: Payload, mask: LayeredModel) -> LayeredModel:
    """Merge the received model with the client's own trained model.

    Sparse payloads overwrite only masked coordinates; full payloads replace
    the local model.
    """
    if payload.values.shapes != trained.shapes:
        raise ValueError("payload does not match the client model shape")
    if payload.full:
        return payload.values.copy()
    keep = mask.map(lambda m: 1.0 - m)
    return payload.values * mask + trained * keep

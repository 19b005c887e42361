"""Evaluation, time-to-accuracy, convergence-assumption monitors and export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import LayeredModel
from .trainer import loss_and_grad, predict

CSV_COLUMNS = ("round", "t_server_s", "cum_time_s", "test_acc", "mean_loss", "eps_t", "uploaded_bits", "mean_D")


@dataclass
class RoundRecord:
    round: int
    t_server_s: float
    cum_time_s: float
    test_acc: float
    mean_loss: float
    eps_t: float
    uploaded_bits: float
    mean_D: float
    per_class_acc: list[float | None] = field(default_factory=list)
    dropout: list[float] = field(default_factory=list)
    realized_dropout: list[float] = field(default_factory=list)
    participants: list[int] = field(default_factory=list)
    eps_weighted: float = float("nan")
    download_bits: float = 0.0

    def row(self) -> list[str]:
        return [str(self.round)] + [repr(float(getattr(self, c))) for c in CSV_COLUMNS[1:]]


def evaluate(model: LayeredModel, x: np.ndarray, y: np.ndarray, num_classes: int) -> tuple[float, list[float | None]]:
    """Top-1 accuracy and per-class accuracy (``None`` for classes absent from the set)."""
    if len(y) == 0:
        raise ValueError("test set is empty")
    correct = predict(model, x) == y
    per_class: list[float | None] = []
    for c in range(num_classes):
        sel = y == c
        per_class.append(float(correct[sel].mean()) if sel.any() else None)
    return float(correct.mean()), per_class


def time_to_accuracy(records: Sequence[RoundRecord], target: float) -> float | None:
    for r in records:
        if r.test_acc >= target:
            return r.cum_time_s
    return None


def t2a(records: Sequence[RoundRecord], baseline: Sequence[RoundRecord], target: float) -> float | None:
    """Scheme's time to ``target`` over the baseline's; ``None`` if never reached."""
    base = time_to_accuracy(baseline, target)
    if base is None:
        raise ValueError(f"baseline never reaches accuracy {target}")
    mine = time_to_accuracy(records, target)
    return None if mine is None else mine / base


def measure_epsilon(
    values: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    weights: Sequence[float] | None = None,
) -> float:
    """Relative squared gap between the masked aggregate and the plain mean.

    ``values`` and ``masks`` are flat vectors in global coordinates. With
    ``weights`` omitted every client counts equally. Coordinates nobody
    uploaded contribute zero to the masked aggregate. Returns NaN when the
    plain mean is zero or no coordinate was uploaded at all.
    """
    if not values:
        raise ValueError("need at least one upload")
    w = np.ones(len(values)) if weights is None else np.asarray(weights, dtype=np.float64)
    num = np.zeros_like(values[0], dtype=np.float64)
    den = np.zeros_like(num)
    plain = np.zeros_like(num)
    for wn, v, m in zip(w, values, masks):
        num += wn * (v * m)
        den += wn * m
        plain += wn * v
    plain /= w.sum()
    if not np.any(den > 0):
        return float("nan")
    masked = np.zeros_like(num)
    covered = den > 0
    masked[covered] = num[covered] / den[covered]
    ref = float(plain @ plain)
    if ref == 0.0:
        return float("nan")
    gap = masked - plain
    return float(gap @ gap) / ref


@dataclass
class BoundParams:
    smoothness: float  # L
    epsilon: float
    lr: float
    period: int  # h
    n_periods: int  # K, so that T = K * h
    sigma: np.ndarray
    init_gap: float  # F(W0) - F(W*)

    def __post_init__(self) -> None:
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.smoothness <= 0:
            raise ValueError("smoothness constant must be positive")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.period < 1 or self.n_periods < 1:
            raise ValueError("h and K must be >= 1")

    @property
    def max_lr(self) -> float:
        L, e = self.smoothness, self.epsilon
        return 2.0 / (L + L * e + 4.0 * (e + 1.0) * e)


def bound_terms(p: BoundParams) -> tuple[float, float, float]:
    """The three right-hand-side terms of the averaged gradient-norm bound."""
    if not 0.0 < p.lr < p.max_lr:
        raise ValueError(f"learning rate {p.lr} violates 0 < lr < {p.max_lr}")
    L, e, lr, h, K = p.smoothness, p.epsilon, p.lr, p.period, p.n_periods
    denom = 2 * lr - L * lr**2 - L * e * lr**2 - 4 * (e + 1) * e * lr**2
    mean_var = float(np.mean(p.sigma**2))
    first = 2 * p.init_gap / (K * h * denom)
    second = (
        L * e * lr**2 * mean_var * (h - 1) * (2 * e + 2 * e * lr**2 * L**2 + 2 * lr**2 * L**2 + 3)
    ) / (h * denom)
    third = L * e * lr**2 * mean_var / (h * denom)
    return first, second, third


def convergence_bound(p: BoundParams) -> float:
    return float(sum(bound_terms(p)))


def full_gradient(model: LayeredModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return loss_and_grad(model, x, y)[1].flatten()


def estimate_sigma(
    model: LayeredModel,
    client_data: Sequence[tuple[np.ndarray, np.ndarray]],
) -> np.ndarray:
    """Distance of each client's full-batch gradient from the sample-weighted mean gradient."""
    grads = [full_gradient(model, x, y) for x, y in client_data]
    sizes = np.array([len(y) for _, y in client_data], dtype=np.float64)
    mean = sum(s * g for s, g in zip(sizes, grads)) / sizes.sum()
    return np.array([float(np.linalg.norm(g - mean)) for g in grads])


def estimate_smoothness(
    models: Sequence[LayeredModel],
    client_data: Sequence[tuple[np.ndarray, np.ndarray]],
) -> float:
    """Largest observed ``||grad F(a) - grad F(b)|| / ||a - b||`` over consecutive pairs."""
    sizes = np.array([len(y) for _, y in client_data], dtype=np.float64)

    def global_grad(m: LayeredModel) -> np.ndarray:
        return sum(s * full_gradient(m, x, y) for s, (x, y) in zip(sizes, client_data)) / sizes.sum()

    best = 0.0
    prev_w, prev_g = None, None
    for m in models:
        w, g = m.flatten(), global_grad(m)
        if prev_w is not None:
            dist = np.linalg.norm(w - prev_w)
            if dist > 0:
                best = max(best, float(np.linalg.norm(g - prev_g) / dist))
        prev_w, prev_g = w, g
    return best


def write_rounds_csv(records: Sequence[RoundRecord], path: Path) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(r.row())


def read_rounds_csv(path: str | Path) -> list[dict[str, float]]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        return [
            {k: (int(v) if k == "round" else float(v)) for k, v in row.items()}
            for row in reader
        ]


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def export(records: Sequence[RoundRecord], out_dir: str | Path, summary: dict | None = None) -> tuple[Path, Path]:
    """Write ``rounds.csv`` and ``summary.json`` into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "rounds.csv"
        write_rounds_csv(records, csv_path)
        doc = dict(summary or {})
        if records:
            doc.setdefault("final_accuracy", records[-1].test_acc)
            doc["per_class_accuracy"] = [r.per_class_acc for r in records]
            doc["dropout"] = [r.dropout for r in records]
            doc["realized_dropout"] = [r.realized_dropout for r in records]
            doc["participants"] = [r.participants for r in records]
            doc["eps_weighted"] = [r.eps_weighted for r in records]
        json_path = out / "summary.json"
        json_path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write results to {out}: {exc}") from exc
    return csv_path, json_path

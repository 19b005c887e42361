"""MLP forward/backward pass and local mini-batch SGD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import LayeredModel, LayerShape, mlp_shapes


class NumericOverflowError(FloatingPointError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at SGD step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    epochs: int = 1
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError(f"invalid training config {self}")


@dataclass
class TrainResult:
    model: LayeredModel
    loss: float
    delta: LayeredModel


def init_model(dims, seed: int, has_bias: bool = True) -> LayeredModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation."""
    rng = np.random.default_rng(seed)
    shapes: list[LayerShape] = mlp_shapes(dims, has_bias)
    weights, biases = [], []
    for s in shapes:
        bound = 1.0 / np.sqrt(s.in_units)
        weights.append(rng.uniform(-bound, bound, size=(s.out_units, s.in_units)))
        biases.append(rng.uniform(-bound, bound, size=s.out_units) if s.has_bias else None)
    return LayeredModel(weights, biases)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _activations(model: LayeredModel, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    h = x
    last = model.n_layers - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T
        if b is not None:
            z = z + b
        h = z if l == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def forward(model: LayeredModel, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    """Logits and mean cross-entropy of a batch."""
    if x.shape[1] != model.weights[0].shape[1]:
        raise ValueError(f"features have dim {x.shape[1]}, model expects {model.weights[0].shape[1]}")
    with np.errstate(over="ignore", invalid="ignore"):
        logits = _activations(model, x)[-1]
        if not np.all(np.isfinite(logits)):
            raise NumericOverflowError("non-finite activation in forward pass")
        loss = float(-_log_softmax(logits)[np.arange(len(y)), y].mean())
    return logits, loss


def loss_and_grad(model: LayeredModel, x: np.ndarray, y: np.ndarray) -> tuple[float, LayeredModel]:
    """Mean cross-entropy and its gradient with respect to every parameter."""
    acts = _activations(model, x)
    logits = acts[-1]
    if not np.all(np.isfinite(logits)):
        raise NumericOverflowError("non-finite activation in forward pass")
    logp = _log_softmax(logits)
    n = len(y)
    loss = float(-logp[np.arange(n), y].mean())

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    gw: list[np.ndarray] = [None] * model.n_layers  # type: ignore[list-item]
    gb: list[np.ndarray | None] = [None] * model.n_layers
    for l in range(model.n_layers - 1, -1, -1):
        gw[l] = delta.T @ acts[l]
        if model.biases[l] is not None:
            gb[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ model.weights[l]) * (acts[l] > 0)
    return loss, LayeredModel(gw, gb)


def sgd_step(model: LayeredModel, grad: LayeredModel, lr: float) -> LayeredModel:
    return model.map(lambda p, g: p - lr * g, grad)


def local_train(model: LayeredModel, x: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> TrainResult:
    """Run ``cfg.epochs`` epochs of mini-batch SGD; the loss is the final-epoch mean."""
    if len(y) == 0:
        raise ValueError("client has no data")
    rng = np.random.default_rng(cfg.seed)
    current = model.copy()
    step = 0
    epoch_loss = 0.0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(y), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grad = loss_and_grad(current, x[batch], y[batch])
            except NumericOverflowError:
                raise DivergenceError(step, float("nan")) from None
            if not np.isfinite(loss):
                raise DivergenceError(step, loss)
            total += loss * len(batch)
            with np.errstate(over="ignore", invalid="ignore"):
                current = sgd_step(current, grad, cfg.lr)
            step += 1
        epoch_loss = total / len(y)
    if not current.is_finite():
        raise DivergenceError(step, float("nan"))
    return TrainResult(current, epoch_loss, current - model)


def grad_check(
    model: LayeredModel,
    x: np.ndarray,
    y: np.ndarray,
    eps: float = 1e-5,
    n_coords: int | None = 200,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central finite differences.

    Checks ``n_coords`` randomly sampled coordinates (all when ``None``). The
    denominator is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    _, grad = loss_and_grad(model, x, y)
    analytic = grad.flatten()
    flat = model.flatten()
    shapes = model.shapes
    coords = np.arange(flat.size)
    if n_coords is not None and n_coords < flat.size:
        coords = np.sort(np.random.default_rng(seed).choice(flat.size, n_coords, replace=False))
    worst = 0.0
    for j in coords:
        plus, minus = flat.copy(), flat.copy()
        plus[j] += eps
        minus[j] -= eps
        lp = forward(LayeredModel.from_flat(plus, shapes), x, y)[1]
        lm = forward(LayeredModel.from_flat(minus, shapes), x, y)[1]
        numeric = (lp - lm) / (2 * eps)
        denom = max(abs(analytic[j]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[j] - numeric) / denom)
    return worst


def predict(model: LayeredModel, x: np.ndarray) -> np.ndarray:
    return _activations(model, x)[-1].argmax(axis=1)

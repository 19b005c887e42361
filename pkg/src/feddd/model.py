"""Dense layered models, nested sub-model geometry and unit-level masks.

A model is a stack of fully connected layers. Layer ``l`` holds a weight
matrix of shape ``(out_units, in_units)`` and an optional bias vector of
length ``out_units``. Sub-models keep the first ``k`` units of every hidden
layer of the global model; the output layer is never shrunk.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when tensors or specs do not match a model shape."""


class InvalidSpecError(ValueError):
    """Raised when a sub-model spec does not fit the global architecture."""


@dataclass(frozen=True)
class LayerShape:
    in_units: int
    out_units: int
    has_bias: bool = True

    def __post_init__(self) -> None:
        if self.in_units < 1 or self.out_units < 1:
            raise ShapeError(f"layer dims must be >= 1, got {self.in_units}->{self.out_units}")

    @property
    def group_size(self) -> int:
        """Parameters owned by one output unit (incoming row plus bias)."""
        return self.in_units + (1 if self.has_bias else 0)

    @property
    def n_params(self) -> int:
        return self.out_units * self.group_size


def mlp_shapes(dims: Sequence[int], has_bias: bool = True) -> list[LayerShape]:
    """Layer shapes of an MLP with layer widths ``dims`` (input first)."""
    if len(dims) < 2:
        raise ShapeError("an MLP needs at least an input and an output width")
    return [LayerShape(dims[i], dims[i + 1], has_bias) for i in range(len(dims) - 1)]


@dataclass
class LayeredModel:
    """Per-layer weights and biases. Also used for 0/1 parameter masks."""

    weights: list[np.ndarray]
    biases: list[np.ndarray | None]

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases):
            raise ShapeError("weights and biases must have one entry per layer")
        for l in range(1, len(self.weights)):
            if self.weights[l].shape[1] != self.weights[l - 1].shape[0]:
                raise ShapeError(
                    f"layer {l - 1} has {self.weights[l - 1].shape[0]} outputs but "
                    f"layer {l} expects {self.weights[l].shape[1]} inputs"
                )
        for w, b in zip(self.weights, self.biases):
            if b is not None and b.shape != (w.shape[0],):
                raise ShapeError(f"bias shape {b.shape} does not match weight {w.shape}")

    @classmethod
    def zeros(cls, shapes: Sequence[LayerShape], fill: float = 0.0) -> "LayeredModel":
        return cls(
            [np.full((s.out_units, s.in_units), fill) for s in shapes],
            [np.full(s.out_units, fill) if s.has_bias else None for s in shapes],
        )

    @property
    def shapes(self) -> list[LayerShape]:
        return [
            LayerShape(w.shape[1], w.shape[0], b is not None)
            for w, b in zip(self.weights, self.biases)
        ]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(s.n_params for s in self.shapes)

    def copy(self) -> "LayeredModel":
        return LayeredModel(
            [w.copy() for w in self.weights],
            [None if b is None else b.copy() for b in self.biases],
        )

    def flatten(self) -> np.ndarray:
        """Concatenate parameters layer by layer: weights (row-major) then bias."""
        parts: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            if b is not None:
                parts.append(b)
        if not parts:
            return np.zeros(0)
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, flat: np.ndarray, shapes: Sequence[LayerShape]) -> "LayeredModel":
        flat = np.asarray(flat, dtype=np.float64)
        expected = sum(s.n_params for s in shapes)
        if flat.shape != (expected,):
            raise ShapeError(f"flat vector has {flat.size} entries, expected {expected}")
        weights, biases = [], []
        pos = 0
        for s in shapes:
            n = s.out_units * s.in_units
            weights.append(flat[pos : pos + n].reshape(s.out_units, s.in_units).copy())
            pos += n
            if s.has_bias:
                biases.append(flat[pos : pos + s.out_units].copy())
                pos += s.out_units
            else:
                biases.append(None)
        return cls(weights, biases)

    def map(self, fn, *others: "LayeredModel") -> "LayeredModel":
        """Apply ``fn`` tensor-wise across this model and ``others``."""
        weights = [fn(w, *(o.weights[l] for o in others)) for l, w in enumerate(self.weights)]
        biases = [
            None if b is None else fn(b, *(o.biases[l] for o in others))
            for l, b in enumerate(self.biases)
        ]
        return LayeredModel(weights, biases)

    def __add__(self, other: "LayeredModel") -> "LayeredModel":
        return self.map(np.add, other)

    def __sub__(self, other: "LayeredModel") -> "LayeredModel":
        return self.map(np.subtract, other)

    def __mul__(self, other: "LayeredModel | float") -> "LayeredModel":
        if isinstance(other, LayeredModel):
            return self.map(np.multiply, other)
        return self.map(lambda a: a * other)

    __rmul__ = __mul__

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flatten())))

    def allclose(self, other: "LayeredModel", **kw) -> bool:
        return self.shapes == other.shapes and np.allclose(self.flatten(), other.flatten(), **kw)

    def array_equal(self, other: "LayeredModel") -> bool:
        return self.shapes == other.shapes and np.array_equal(self.flatten(), other.flatten())


@dataclass(frozen=True)
class SubModelSpec:
    """Kept widths of the hidden layers, as prefixes of the global widths."""

    hidden: tuple[int, ...]

    @classmethod
    def full(cls, dims: Sequence[int]) -> "SubModelSpec":
        return cls(tuple(dims[1:-1]))

    def validate(self, dims: Sequence[int]) -> None:
        global_hidden = tuple(dims[1:-1])
        if len(self.hidden) != len(global_hidden):
            raise InvalidSpecError(
                f"spec has {len(self.hidden)} hidden widths, architecture has {len(global_hidden)}"
            )
        for l, (k, g) in enumerate(zip(self.hidden, global_hidden)):
            if not 1 <= k <= g:
                raise InvalidSpecError(f"hidden layer {l}: width {k} outside [1, {g}]")

    def dims(self, global_dims: Sequence[int]) -> tuple[int, ...]:
        self.validate(global_dims)
        return (global_dims[0], *self.hidden, global_dims[-1])

    def shapes(self, global_dims: Sequence[int], has_bias: bool = True) -> list[LayerShape]:
        return mlp_shapes(self.dims(global_dims), has_bias)


def param_count(spec: SubModelSpec, global_dims: Sequence[int], has_bias: bool = True) -> int:
    """Total scalar parameters (weights and biases) of the sub-model."""
    return sum(s.n_params for s in spec.shapes(global_dims, has_bias))


def embed(
    sub: LayeredModel, spec: SubModelSpec, global_dims: Sequence[int]
) -> tuple[LayeredModel, LayeredModel]:
    """Place a sub-model into global coordinates.

    Returns ``(values, mask)`` where ``values`` is global-shaped with the
    sub-model in prefix positions (zeros elsewhere) and ``mask`` is 1.0 on
    occupied positions.
    """
    has_bias = all(b is not None for b in sub.biases)
    sub_shapes = spec.shapes(global_dims, has_bias)
    if sub.shapes != sub_shapes:
        raise ShapeError(f"sub-model shapes {sub.shapes} do not conform to {spec}")
    gshapes = mlp_shapes(global_dims, has_bias)
    values = LayeredModel.zeros(gshapes)
    mask = LayeredModel.zeros(gshapes)
    for l, s in enumerate(sub_shapes):
        values.weights[l][: s.out_units, : s.in_units] = sub.weights[l]
        mask.weights[l][: s.out_units, : s.in_units] = 1.0
        if s.has_bias:
            values.biases[l][: s.out_units] = sub.biases[l]
            mask.biases[l][: s.out_units] = 1.0
    return values, mask


def extract(full: LayeredModel, spec: SubModelSpec, global_dims: Sequence[int]) -> LayeredModel:
    """Inverse of :func:`embed`: slice the prefix sub-model out of a global model."""
    has_bias = all(b is not None for b in full.biases)
    if full.shapes != mlp_shapes(global_dims, has_bias):
        raise ShapeError("model does not match the global architecture")
    weights, biases = [], []
    for l, s in enumerate(spec.shapes(global_dims, has_bias)):
        weights.append(full.weights[l][: s.out_units, : s.in_units].copy())
        biases.append(full.biases[l][: s.out_units].copy() if s.has_bias else None)
    return LayeredModel(weights, biases)


@dataclass
class UnitMask:
    """Per-layer boolean vectors over output units.

    ``None`` marks a layer that is always uploaded in full (the output layer).
    """

    layers: list[np.ndarray | None] = field(default_factory=list)

    def popcounts(self) -> list[int | None]:
        return [None if m is None else int(m.sum()) for m in self.layers]

    def to_json(self) -> str:
        return json.dumps([None if m is None else [int(v) for v in m] for m in self.layers])

    @classmethod
    def from_json(cls, text: str) -> "UnitMask":
        return cls([None if m is None else np.array(m, dtype=bool) for m in json.loads(text)])


def unit_mask_to_param_mask(mask: UnitMask, shapes: Sequence[LayerShape]) -> LayeredModel:
    """Expand unit bits to a 0/1 parameter mask (incoming row plus bias per unit)."""
    if len(mask.layers) != len(shapes):
        raise ShapeError(f"mask has {len(mask.layers)} layers, model has {len(shapes)}")
    out = LayeredModel.zeros(shapes, fill=1.0)
    for l, (bits, s) in enumerate(zip(mask.layers, shapes)):
        if bits is None:
            continue
        bits = np.asarray(bits, dtype=bool)
        if bits.shape != (s.out_units,):
            raise ShapeError(f"layer {l}: mask length {bits.shape} vs {s.out_units} units")
        out.weights[l][~bits, :] = 0.0
        if s.has_bias:
            out.biases[l][~bits] = 0.0
    return out


def masked_param_count(mask: UnitMask, shapes: Sequence[LayerShape]) -> int:
    """Closed form of the nonzero count of the induced parameter mask."""
    total = 0
    for bits, s in zip(mask.layers, shapes):
        kept = s.out_units if bits is None else int(np.count_nonzero(bits))
        total += kept * s.group_size
    return total


def save_checkpoint(model: LayeredModel, path: str | Path, extra: dict | None = None) -> None:
    """Write a JSON header line followed by little-endian float64 parameters."""
    path = Path(path)
    header = {
        "layers": [[s.in_units, s.out_units, s.has_bias] for s in model.shapes],
        "dtype": "<f8",
    }
    if extra:
        header["extra"] = extra
    with path.open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(model.flatten().astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[LayeredModel, dict]:
    path = Path(path)
    with path.open("rb") as fh:
        header = json.loads(fh.readline())
        payload = fh.read()
    shapes = [LayerShape(i, o, bool(b)) for i, o, b in header["layers"]]
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return LayeredModel.from_flat(flat, shapes), header.get("extra", {})

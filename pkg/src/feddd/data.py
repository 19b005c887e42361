"""Datasets and heterogeneous client partitions."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

PARTITION_MODES = ("iid", "noniid_a", "noniid_b", "imbalanced")


class IdxError(ValueError):
    """Base class for IDX parsing failures."""


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass
class LabeledDataset:
    x: np.ndarray  # (n, d) float64
    y: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ValueError("x must be (n, d) and y must be (n,)")
        if self.x.shape[0] == 0:
            raise ValueError("dataset is empty")
        if self.y.min() < 0 or self.y.max() >= self.num_classes:
            raise ValueError("labels out of range")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("features must be finite")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.x[idx], self.y[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)


def class_centers(num_classes: int, dim: int, center_seed: int = 0) -> np.ndarray:
    """Fixed unit-norm class directions."""
    rng = np.random.default_rng(center_seed)
    centers = rng.standard_normal((num_classes, dim))
    return centers / np.linalg.norm(centers, axis=1, keepdims=True)


def gen_synthetic(
    num_classes: int,
    dim: int,
    per_class: int,
    seed: int,
    noise: float = 0.3,
    center_seed: int = 0,
) -> LabeledDataset:
    """Gaussian blobs around fixed unit-norm directions, ordered by class."""
    if num_classes < 2 or dim < 1:
        raise ValueError("need at least 2 classes and 1 dimension")
    centers = class_centers(num_classes, dim, center_seed)
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(num_classes), per_class)
    x = centers[y] + noise * rng.standard_normal((y.size, dim))
    return LabeledDataset(x, y, num_classes)


def _read_idx(path: Path, magic: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes is too short for an IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise TruncatedFileError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    body = raw[header_len:]
    if len(body) < int(np.prod(dims)):
        raise TruncatedFileError(f"{path}: expected {int(np.prod(dims))} data bytes, got {len(body)}")
    return dims, body[: int(np.prod(dims))]


def load_idx(images_path: str | Path, labels_path: str | Path, num_classes: int = 10) -> LabeledDataset:
    """Read an MNIST-style IDX image/label pair; pixels are scaled to [0, 1]."""
    img_dims, img_body = _read_idx(Path(images_path), 0x00000803)
    lbl_dims, lbl_body = _read_idx(Path(labels_path), 0x00000801)
    if img_dims[0] != lbl_dims[0]:
        raise CountMismatchError(f"{img_dims[0]} images but {lbl_dims[0]} labels")
    x = np.frombuffer(img_body, dtype=np.uint8).reshape(img_dims[0], -1).astype(np.float64) / 255.0
    y = np.frombuffer(lbl_body, dtype=np.uint8).astype(np.int64)
    return LabeledDataset(x, y, num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: str | Path, labels_path: str | Path) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels ``(n,)`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", 0x803, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", 0x801, labels.size) + labels.tobytes())


def distribution_score(dis: Sequence[float], num_classes: int) -> float:
    """Sum over classes of min(C * share, 1); uniform data scores C."""
    dis = np.asarray(dis, dtype=np.float64)
    return float(np.minimum(num_classes * dis, 1.0).sum())


@dataclass
class Partition:
    indices: list[np.ndarray]
    proportions: np.ndarray  # (N, C)
    pool: np.ndarray | None = None  # global pool the split was drawn from (imbalanced mode)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.indices])

    def to_json(self) -> str:
        return json.dumps({str(n): [int(i) for i in ix] for n, ix in enumerate(self.indices)})

    @classmethod
    def from_json(cls, text: str, ds: LabeledDataset) -> "Partition":
        raw = json.loads(text)
        indices = [np.array(raw[str(n)], dtype=np.int64) for n in range(len(raw))]
        return cls(indices, _proportions(ds, indices))


def _proportions(ds: LabeledDataset, indices: list[np.ndarray]) -> np.ndarray:
    props = np.zeros((len(indices), ds.num_classes))
    for n, ix in enumerate(indices):
        if len(ix):
            props[n] = np.bincount(ds.y[ix], minlength=ds.num_classes) / len(ix)
    return props


def imbalanced_pool(
    ds: LabeledDataset,
    n_common: int,
    ratio: float = 0.4,
    n_rare: int = 3,
    seed: int = 0,
) -> np.ndarray:
    """Indices of a pool with ``n_common`` samples per common class and
    ``round(ratio * n_common)`` per rare class; class ids ``0 .. n_rare - 1`` are rare."""
    rng = np.random.default_rng(seed)
    n_rare_samples = int(round(ratio * n_common))
    picked = []
    for c in range(ds.num_classes):
        want = n_rare_samples if c < n_rare else n_common
        ix = np.flatnonzero(ds.y == c)
        if len(ix) < want:
            raise InsufficientDataError(f"class {c} has {len(ix)} samples, need {want}")
        picked.append(np.sort(rng.choice(ix, size=want, replace=False)))
    return np.concatenate(picked)


def _split_by_classes(
    ds: LabeledDataset, pool: np.ndarray, client_classes: list[np.ndarray], rng: np.random.Generator
) -> list[np.ndarray]:
    # Each class's samples are shuffled and split evenly among the clients claiming it.
    parts: list[list[np.ndarray]] = [[] for _ in client_classes]
    labels = ds.y[pool]
    for c in range(ds.num_classes):
        claimants = [n for n, cls in enumerate(client_classes) if c in cls]
        if not claimants:
            continue
        ix = rng.permutation(pool[labels == c])
        for n, chunk in zip(claimants, np.array_split(ix, len(claimants))):
            if len(chunk) == 0:
                raise InsufficientDataError(
                    f"class {c} has {len(ix)} samples for {len(claimants)} clients"
                )
            parts[n].append(chunk)
    return [np.sort(np.concatenate(p)) for p in parts]


def partition(
    ds: LabeledDataset,
    n_clients: int,
    mode: str,
    seed: int,
    *,
    classes_per_client: int = 3,
    n_common: int | None = None,
    imbalance_ratio: float = 0.4,
    n_rare: int = 3,
) -> Partition:
    """Split ``ds`` across ``n_clients`` clients.

    ``iid`` deals a shuffled copy evenly; ``noniid_a`` gives each client a
    uniformly drawn number of classes in ``{2, ..., C}``; ``noniid_b`` gives
    every client ``classes_per_client`` classes; ``imbalanced`` first builds
    a pool with rare classes at ``imbalance_ratio`` of the common count and
    then splits it like ``noniid_b``.
    """
    if n_clients < 1:
        raise ValueError("need at least one client")
    if mode not in PARTITION_MODES:
        raise ValueError(f"unknown partition mode {mode!r}")
    rng = np.random.default_rng(seed)
    C = ds.num_classes
    pool = np.arange(len(ds))
    kept_pool = None

    if mode == "iid":
        if len(ds) < n_clients:
            raise InsufficientDataError(f"{len(ds)} samples for {n_clients} clients")
        indices = [np.sort(p) for p in np.array_split(rng.permutation(pool), n_clients)]
        return Partition(indices, _proportions(ds, indices))

    if mode == "imbalanced":
        if n_common is None:
            n_common = int(ds.class_counts().min())
        pool = imbalanced_pool(ds, n_common, imbalance_ratio, n_rare, seed=int(rng.integers(2**31)))
        kept_pool = pool

    if mode == "noniid_a":
        counts = rng.integers(2, C + 1, size=n_clients)
    else:
        if not 1 <= classes_per_client <= C:
            raise ValueError(f"classes_per_client must be in [1, {C}]")
        counts = np.full(n_clients, classes_per_client)
    client_classes = [np.sort(rng.choice(C, size=k, replace=False)) for k in counts]
    indices = _split_by_classes(ds, pool, client_classes, rng)
    return Partition(indices, _proportions(ds, indices), kept_pool)

"""Core data model, file ingestion and probability helpers.

Datasets are stored as dense arrays (``features`` with shape ``(N, H, W, K)``
and integer ``labels``); :class:`SampleGrid` is the per-sample view.
Labels are 0-based everywhere.
"""

from __future__ import annotations

import csv
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import InvalidInputError, ParseError

RAW_MAGIC = b"DCAL"
_RAW_HEADER = struct.Struct("<4s5I")


# ---------------------------------------------------------------------------
# Probability helpers
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray | Sequence[float]) -> np.ndarray:
    """Numerically stable softmax along the last axis.

    Accepts a single logit vector or a 2-D batch ``(n, C)``.
    """
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("softmax: logits must be finite")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def argmax_lowest(x: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class index (numpy's default)."""
    return np.argmax(np.asarray(x), axis=-1)


def is_prob_vector(p: np.ndarray, atol: float = 1e-9) -> bool:
    p = np.asarray(p, dtype=np.float64)
    return bool(
        np.all(np.isfinite(p))
        and np.all(p >= 0.0)
        and np.all(p <= 1.0)
        and np.all(np.abs(p.sum(axis=-1) - 1.0) <= atol)
    )


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleGrid:
    """A single ``H x W x K`` input with its class label."""

    values: np.ndarray
    label: int

    def __post_init__(self) -> None:
        if self.values.ndim != 3:
            raise InvalidInputError(f"SampleGrid needs an H x W x K array, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("SampleGrid values must be finite")
        if self.label < 0:
            raise InvalidInputError("label must be non-negative")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """An ordered set of equally shaped samples with labels in ``[0, num_classes)``."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        feats = self.features
        labels = np.asarray(self.labels)
        if feats.ndim != 4:
            raise InvalidInputError(f"features must be (N, H, W, K), got {feats.shape}")
        if feats.shape[0] == 0:
            raise InvalidInputError("empty dataset")
        if labels.shape != (feats.shape[0],):
            raise InvalidInputError("labels must be a vector with one entry per sample")
        if self.num_classes < 2:
            raise InvalidInputError("num_classes must be >= 2")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise InvalidInputError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(feats)):
            raise InvalidInputError("features must be finite")
        object.__setattr__(self, "labels", labels.astype(np.int64, copy=False))
        feats.flags.writeable = False
        self.labels.flags.writeable = False

    @classmethod
    def from_samples(cls, samples: Iterable[SampleGrid], num_classes: int) -> "LabeledDataset":
        samples = list(samples)
        if not samples:
            raise InvalidInputError("empty dataset")
        shapes = {s.shape for s in samples}
        if len(shapes) != 1:
            raise InvalidInputError(f"inconsistent sample shapes: {sorted(shapes)}")
        feats = np.stack([s.values for s in samples])
        labels = np.array([s.label for s in samples], dtype=np.int64)
        return cls(feats, labels, num_classes)

    @classmethod
    def from_flat(cls, x: np.ndarray, labels: np.ndarray, num_classes: int) -> "LabeledDataset":
        x = np.asarray(x)
        return cls(x.reshape(x.shape[0], 1, 1, -1), np.asarray(labels), num_classes)

    def __len__(self) -> int:
        return self.features.shape[0]

    def __iter__(self) -> Iterator[SampleGrid]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> SampleGrid:
        return SampleGrid(self.features[i], int(self.labels[i]))

    @property
    def samples(self) -> list[SampleGrid]:
        return list(self)

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return self.features.shape[1:]  # type: ignore[return-value]

    @property
    def input_dim(self) -> int:
        h, w, k = self.grid_shape
        return h * w * k

    def flat(self) -> np.ndarray:
        """Features as an ``(N, D)`` float64 matrix."""
        return self.features.reshape(len(self), -1).astype(np.float64, copy=False)

    def subset(self, idx: Sequence[int] | np.ndarray) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)

    def with_features(self, features: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(features, self.labels, self.num_classes)

    def equals(self, other: "LabeledDataset") -> bool:
        return (
            self.num_classes == other.num_classes
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


def concat_datasets(parts: Sequence[LabeledDataset]) -> LabeledDataset:
    if not parts:
        raise InvalidInputError("nothing to concatenate")
    return LabeledDataset(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]),
        parts[0].num_classes,
    )


def split_dataset(
    d: LabeledDataset, fractions: Sequence[float], seed: int
) -> list[LabeledDataset]:
    """Shuffle once with ``seed`` and cut into consecutive pieces of the given fractions."""
    fr = np.asarray(fractions, dtype=np.float64)
    if np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise InvalidInputError("split fractions must be positive and sum to 1")
    perm = np.random.default_rng(seed).permutation(len(d))
    cuts = np.floor(np.cumsum(fr)[:-1] * len(d)).astype(int)
    return [d.subset(np.sort(part)) for part in np.split(perm, cuts)]


@dataclass(frozen=True)
class LogitRecord:
    logits: np.ndarray
    label: int


@dataclass(frozen=True, eq=False)
class LogitSet:
    """Batch of logit vectors ``(n, C)`` with ground-truth labels.

    Iterating yields :class:`LogitRecord` objects.
    """

    logits: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        z = np.asarray(self.logits, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if z.ndim != 2 or z.shape[0] == 0:
            raise InvalidInputError(f"logits must be a non-empty (n, C) array, got {z.shape}")
        if y.shape != (z.shape[0],):
            raise InvalidInputError("one label per logit row required")
        if not np.all(np.isfinite(z)):
            raise InvalidInputError("logits must be finite")
        if y.min() < 0 or y.max() >= z.shape[1]:
            raise InvalidInputError(f"labels must lie in [0, {z.shape[1]})")
        object.__setattr__(self, "logits", z)
        object.__setattr__(self, "labels", y)

    @classmethod
    def from_records(cls, records: Iterable[LogitRecord]) -> "LogitSet":
        records = list(records)
        if not records:
            raise InvalidInputError("no logit records")
        return cls(np.stack([np.asarray(r.logits, dtype=np.float64) for r in records]),
                   np.array([r.label for r in records]))

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]

    def __len__(self) -> int:
        return self.logits.shape[0]

    def __iter__(self) -> Iterator[LogitRecord]:
        for z, y in zip(self.logits, self.labels):
            yield LogitRecord(z, int(y))


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def _check_range(features: np.ndarray, path: Path) -> None:
    if features.size and (features.min() < 0.0 or features.max() > 1.0):
        warnings.warn(f"{path}: feature values outside [0, 1]", stacklevel=3)


def load_dataset(path: str | Path, format: str = "csv", num_classes: int | None = None) -> LabeledDataset:
    """Read a dataset file (``csv`` or ``raw``).

    CSV carries no class count; pass ``num_classes`` to validate labels
    against it, otherwise ``max(label) + 1`` (at least 2) is used.
    """
    path = Path(path)
    if format == "csv":
        return _load_dataset_csv(path, num_classes)
    if format in ("raw", "raw-binary"):
        return _load_dataset_raw(path, num_classes)
    raise InvalidInputError(f"unknown dataset format {format!r}")


def _load_dataset_csv(path: Path, num_classes: int | None) -> LabeledDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise ParseError(f"{path}: empty dataset")
    header = [h.strip() for h in rows[0]]
    if not header or header[-1] != "label" or header[:-1] != [f"f{i}" for i in range(len(header) - 1)]:
        raise ParseError(f"{path}: line 1: expected header f0,...,f{{D-1}},label")
    if len(rows) == 1:
        raise ParseError(f"{path}: empty dataset")
    d = len(header) - 1
    feats = np.empty((len(rows) - 1, d), dtype=np.float64)
    labels = np.empty(len(rows) - 1, dtype=np.int64)
    for i, row in enumerate(rows[1:]):
        lineno = i + 2
        if len(row) != d + 1:
            raise ParseError(f"{path}: line {lineno}: expected {d + 1} fields, got {len(row)}")
        try:
            feats[i] = [float(v) for v in row[:-1]]
            labels[i] = int(row[-1])
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}") from None
        if not np.all(np.isfinite(feats[i])):
            raise ParseError(f"{path}: line {lineno}: non-finite feature")
        if labels[i] < 0 or (num_classes is not None and labels[i] >= num_classes):
            raise ParseError(f"{path}: line {lineno}: label {labels[i]} out of range")
    c = num_classes if num_classes is not None else max(2, int(labels.max()) + 1)
    _check_range(feats, path)
    return LabeledDataset.from_flat(feats, labels, c)


def _load_dataset_raw(path: Path, num_classes: int | None) -> LabeledDataset:
    buf = Path(path).read_bytes()
    if len(buf) == 0:
        raise ParseError(f"{path}: empty dataset")
    if len(buf) < _RAW_HEADER.size:
        raise ParseError(f"{path}: offset 0: truncated header")
    magic, n, h, w, k, c = _RAW_HEADER.unpack_from(buf, 0)
    if magic != RAW_MAGIC:
        raise ParseError(f"{path}: offset 0: bad magic {magic!r}")
    if n == 0:
        raise ParseError(f"{path}: empty dataset")
    if num_classes is not None and c != num_classes:
        raise ParseError(f"{path}: offset 20: file declares C={c}, expected {num_classes}")
    n_vals = n * h * w * k
    expected = _RAW_HEADER.size + 4 * n_vals + 4 * n
    if len(buf) != expected:
        raise ParseError(f"{path}: size {len(buf)} does not match header (expected {expected} bytes)")
    off = _RAW_HEADER.size
    feats = np.frombuffer(buf, dtype="<f4", count=n_vals, offset=off).reshape(n, h, w, k).astype(np.float32)
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=off + 4 * n_vals).astype(np.int64)
    bad = np.flatnonzero(labels >= c)
    if bad.size:
        i = int(bad[0])
        raise ParseError(f"{path}: offset {off + 4 * n_vals + 4 * i}: label {labels[i]} >= C={c}")
    if not np.all(np.isfinite(feats)):
        raise ParseError(f"{path}: non-finite feature values")
    _check_range(feats, path)
    return LabeledDataset(feats, labels, int(c))


def write_dataset(d: LabeledDataset, path: str | Path, format: str = "csv") -> None:
    path = Path(path)
    if format == "csv":
        x = d.flat()
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow([f"f{i}" for i in range(x.shape[1])] + ["label"])
            for row, y in zip(x, d.labels):
                wr.writerow([repr(float(v)) for v in row] + [int(y)])
    elif format in ("raw", "raw-binary"):
        n, h, w, k = d.features.shape
        with open(path, "wb") as fh:
            fh.write(_RAW_HEADER.pack(RAW_MAGIC, n, h, w, k, d.num_classes))
            fh.write(np.ascontiguousarray(d.features, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(d.labels, dtype="<u4").tobytes())
    else:
        raise InvalidInputError(f"unknown dataset format {format!r}")


def load_logits(path: str | Path) -> LogitSet:
    """Read a logit CSV with header ``z0,...,z{C-1},label``."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ParseError(f"{path}: empty logit file")
    header = [h.strip() for h in rows[0]]
    c = len(header) - 1
    if c < 2 or header[-1] != "label" or header[:-1] != [f"z{i}" for i in range(c)]:
        raise ParseError(f"{path}: line 1: expected header z0,...,z{{C-1}},label")
    if len(rows) == 1:
        raise ParseError(f"{path}: no logit rows")
    z = np.empty((len(rows) - 1, c))
    y = np.empty(len(rows) - 1, dtype=np.int64)
    for i, row in enumerate(rows[1:]):
        lineno = i + 2
        if len(row) != c + 1:
            raise ParseError(f"{path}: line {lineno}: expected {c + 1} fields, got {len(row)}")
        try:
            z[i] = [float(v) for v in row[:-1]]
            y[i] = int(row[-1])
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in z[i]):
            raise ParseError(f"{path}: line {lineno}: non-finite logit")
        if not 0 <= y[i] < c:
            raise ParseError(f"{path}: line {lineno}: label {y[i]} out of range")
    return LogitSet(z, y)


def write_logits(logits: LogitSet, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow([f"z{i}" for i in range(logits.num_classes)] + ["label"])
        for z, y in zip(logits.logits, logits.labels):
            wr.writerow([repr(float(v)) for v in z] + [int(y)])

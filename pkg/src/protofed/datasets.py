"""Dataset generation, loading and the one-class-per-client partitioner."""

from __future__ import annotations

import csv
import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng as rngs


class DataFormatError(ValueError):
    """Input file is malformed; the message carries the line or byte offset."""


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    sample_ids: np.ndarray | None = None
    class_names: list[str] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be (n, d) with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.labels))
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(
            self.features[idx], self.labels[idx], self.num_classes, self.sample_ids[idx], self.class_names
        )


@dataclass
class DataSplit:
    train: LabeledDataset
    test: LabeledDataset
    scaler: "MinMaxScaler | None" = None


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    label: int
    features: np.ndarray
    sample_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.sample_ids)


def partition_extreme(dataset: LabeledDataset, num_clients: int) -> list[ClientShard]:
    """Client k receives exactly the samples of class k."""
    if num_clients != dataset.num_classes:
        raise ValueError(
            f"extreme partitioning needs one client per class: K={num_clients}, C={dataset.num_classes}"
        )
    shards = []
    for k in range(num_clients):
        idx = np.flatnonzero(dataset.labels == k)
        feats = dataset.features[idx].copy()
        feats.flags.writeable = False
        ids = dataset.sample_ids[idx].copy()
        ids.flags.writeable = False
        shards.append(ClientShard(k, k, feats, ids))
    return shards


def split_per_class(dataset: LabeledDataset, train_fraction: float, seed: int) -> DataSplit:
    """Seeded per-class train/test split (at least one train sample per class)."""
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError("train_fraction must lie in (0, 1]")
    gen = rngs.stream(seed, "split")
    train_idx, test_idx = [], []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[gen.permutation(len(idx))]
        n_train = max(1, int(round(train_fraction * len(idx)))) if len(idx) else 0
        train_idx.append(np.sort(idx[:n_train]))
        test_idx.append(np.sort(idx[n_train:]))
    return DataSplit(
        dataset.subset(np.concatenate(train_idx)), dataset.subset(np.concatenate(test_idx))
    )


def gen_synthetic_blobs(
    num_classes: int, n_per_class: int, dim: int, separation: float, seed: int
) -> LabeledDataset:
    """Unit-covariance Gaussian clusters with pairwise mean distance >= separation.

    When ``num_classes <= dim`` the means are scaled orthonormal directions
    (pairwise distance exactly ``separation``) under a seeded rotation and
    offset; otherwise they are rejection-sampled in a ball.
    """
    if separation <= 0:
        raise ValueError("separation must be positive")
    if num_classes < 1 or n_per_class < 1 or dim < 1:
        raise ValueError("class count, samples per class and dim must be positive")
    gen = rngs.stream(seed, "blobs")
    if num_classes <= dim:
        q, _ = np.linalg.qr(gen.standard_normal((dim, dim)))
        means = q[:num_classes] * (separation / np.sqrt(2.0))
        means = means + gen.normal(0.0, 1.0, size=dim)
    else:
        if dim == 1:
            raise ValueError(f"cannot place {num_classes} classes in 1 dimension by rejection")
        means = _rejection_means(num_classes, dim, separation, gen)
    feats = np.concatenate([m + gen.standard_normal((n_per_class, dim)) for m in means])
    labels = np.repeat(np.arange(num_classes), n_per_class)
    return LabeledDataset(feats, labels, num_classes)


def _rejection_means(c: int, dim: int, sep: float, gen: np.random.Generator, tries: int = 20000) -> np.ndarray:
    radius = sep * c ** (1.0 / dim) * 1.5
    means: list[np.ndarray] = []
    for _ in range(tries):
        cand = gen.uniform(-radius, radius, size=dim)
        if all(np.linalg.norm(cand - m) >= sep for m in means):
            means.append(cand)
            if len(means) == c:
                return np.array(means)
    raise ValueError(f"could not place {c} means {sep} apart in {dim} dimensions")


# -- tabular ----------------------------------------------------------------

@dataclass
class MinMaxScaler:
    minimum: np.ndarray = field(default_factory=lambda: np.zeros(0))
    span: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def fit(cls, x: np.ndarray) -> "MinMaxScaler":
        x = np.asarray(x, dtype=np.float64)
        lo, hi = x.min(axis=0), x.max(axis=0)
        return cls(lo, hi - lo)

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        safe = np.where(self.span > 0, self.span, 1.0)
        out = (x - self.minimum) / safe
        return np.where(self.span > 0, out, 0.0)

    def to_json(self) -> str:
        return json.dumps(
            {"kind": "minmax", "minimum": self.minimum.tolist(), "span": self.span.tolist()},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "MinMaxScaler":
        obj = json.loads(text)
        if obj.get("kind") != "minmax":
            raise DataFormatError("not a min-max scaler record")
        return cls(np.asarray(obj["minimum"], dtype=np.float64), np.asarray(obj["span"], dtype=np.float64))


def read_tabular(
    path, label_column: str, drop_columns: Sequence[str] = (), delimiter: str = ","
) -> LabeledDataset:
    """Parse a delimited text file with a header row; features are unscaled.

    Integer labels are used as-is when they already form 0..C-1; any other
    labels are mapped to class indices in sorted order.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file, expected a header row") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise DataFormatError(f"{path}:1: label column {label_column!r} not in header")
        missing = [c for c in drop_columns if c not in header]
        if missing:
            raise DataFormatError(f"{path}:1: unknown columns to drop: {missing}")
        li = header.index(label_column)
        keep = [i for i, h in enumerate(header) if i != li and h not in drop_columns]
        raw_labels, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            lab = row[li].strip()
            if not lab:
                raise DataFormatError(f"{path}:{lineno}: empty label")
            try:
                rows.append([float(row[i]) for i in keep])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            raw_labels.append(lab)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    names = sorted(set(raw_labels), key=_label_sort_key)
    index = {name: i for i, name in enumerate(names)}
    labels = np.array([index[lab] for lab in raw_labels])
    return LabeledDataset(np.array(rows), labels, len(names), class_names=names)


def _label_sort_key(label: str):
    try:
        return (0, int(label), "")
    except ValueError:
        return (1, 0, label)


def load_tabular(
    path,
    label_column: str,
    drop_columns: Sequence[str] = (),
    train_fraction: float = 0.8,
    seed: int = 0,
) -> DataSplit:
    """Read, split per class, and min-max scale with a scaler fitted on train."""
    data = read_tabular(path, label_column, drop_columns)
    if train_fraction == 1.0:
        split = DataSplit(data, data.subset(np.zeros(0, dtype=np.int64)))
    else:
        split = split_per_class(data, train_fraction, seed)
    scaler = MinMaxScaler.fit(split.train.features)
    split.train.features = scaler.transform(split.train.features)
    if len(split.test):
        split.test.features = scaler.transform(split.test.features)
    split.scaler = scaler
    return split


# -- IDX images -------------------------------------------------------------

_IDX_TYPES = {0x08: (">u1", 1), 0x09: (">i1", 1), 0x0B: (">i2", 2), 0x0C: (">i4", 4), 0x0D: (">f4", 4), 0x0E: (">f8", 8)}


def read_idx(path) -> np.ndarray:
    """Parse an IDX file: two zero bytes, type code, rank, big-endian u32 dims."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataFormatError(f"{path}@0: truncated header")
    zero, code, rank = struct.unpack_from(">HBB", raw, 0)
    if zero != 0 or code not in _IDX_TYPES:
        raise DataFormatError(f"{path}@0: bad magic {raw[:4].hex()}")
    if len(raw) < 4 + 4 * rank:
        raise DataFormatError(f"{path}@4: truncated dimension table")
    dims = struct.unpack_from(f">{rank}I", raw, 4)
    dtype, width = _IDX_TYPES[code]
    offset = 4 + 4 * rank
    expected = int(np.prod(dims)) * width
    if len(raw) - offset != expected:
        raise DataFormatError(
            f"{path}@{offset}: header dims {dims} need {expected} payload bytes, found {len(raw) - offset}"
        )
    return np.frombuffer(raw, dtype=dtype, offset=offset).reshape(dims)


def load_idx_images(images_path, labels_path) -> LabeledDataset:
    """Images flattened to rows and scaled to [0, 1]; labels 0..C-1."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{labels_path}@0: {labels.shape} labels for {images.shape[0]} images"
        )
    feats = images.reshape(images.shape[0], -1).astype(np.float64)
    if images.dtype == np.dtype(">u1"):
        feats /= 255.0
    labels = labels.astype(np.int64)
    return LabeledDataset(feats, labels, int(labels.max()) + 1 if len(labels) else 0)


def write_idx(path, array: np.ndarray) -> None:
    """Write an unsigned-byte IDX file (used for fixtures and conversions)."""
    arr = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, 0x08, arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())

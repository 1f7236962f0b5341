"""Labeled tabular datasets: CSV ingestion, z-score normalization, splits, synthetic blobs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class NonNumericFeatureError(ParseError):
    def __init__(self, line: int, column: str, value: str):
        super().__init__(line, f"non-numeric value {value!r} in feature column {column!r}")
        self.column = column


class EmptyDatasetError(DataError):
    pass


class FractionError(DataError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    feature_names: tuple[str, ...] | None = None
    row_index: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or len(x) < 1:
            raise EmptyDatasetError("dataset needs at least one row of 2-D features")
        if y.shape != (len(x),):
            raise DataError("labels must be a vector with one entry per row")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(x)):
            raise DataError("non-finite feature values")
        idx = np.arange(len(x)) if self.row_index is None else np.asarray(self.row_index)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "row_index", idx)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, rows: np.ndarray) -> "Dataset":
        return replace(self, features=self.features[rows], labels=self.labels[rows],
                       row_index=self.row_index[rows])


def _sorted_labels(raw: Sequence[str]) -> list[str]:
    uniq = set(raw)
    try:
        return sorted(uniq, key=float)
    except ValueError:
        return sorted(uniq)


def load_csv(path: str | Path, label_column: str) -> Dataset:
    """Read a headered CSV; every non-label column must be numeric.

    Labels are remapped to 0..C-1 following the sorted order of the original
    values (numeric order when all labels parse as numbers).
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyDatasetError(f"{path} is empty")
        header = [h.strip() for h in header]
        if label_column not in header:
            raise DataError(f"label column {label_column!r} not in header {header}")
        li = header.index(label_column)
        names = [h for i, h in enumerate(header) if i != li]
        rows, raw_labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(line_no, f"expected {len(header)} fields, found {len(row)}")
            values = []
            for i, cell in enumerate(row):
                if i == li:
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise NonNumericFeatureError(line_no, header[i], cell) from None
                if not math.isfinite(v):
                    raise ParseError(line_no, f"non-finite value in column {header[i]!r}")
                values.append(v)
            rows.append(values)
            raw_labels.append(row[li].strip())
    if not rows:
        raise EmptyDatasetError(f"{path} has no data rows")
    order = _sorted_labels(raw_labels)
    remap = {lab: i for i, lab in enumerate(order)}
    labels = np.array([remap[lab] for lab in raw_labels], dtype=np.int64)
    features = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    return Dataset(features, labels, len(order), tuple(names))


def save_csv(ds: Dataset, path: str | Path, label_column: str = "label") -> None:
    names = ds.feature_names or tuple(f"f{i}" for i in range(ds.dim))
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*names, label_column])
        for x, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


@dataclass(frozen=True, eq=False)
class Normalizer:
    mean: np.ndarray
    scale: np.ndarray

    def apply(self, ds: Dataset) -> Dataset:
        if ds.dim != len(self.mean):
            raise DataError(f"normalizer fit on {len(self.mean)} features, got {ds.dim}")
        return replace(ds, features=(ds.features - self.mean) / self.scale)

    def invert(self, ds: Dataset) -> Dataset:
        return replace(ds, features=ds.features * self.scale + self.mean)


def fit_normalizer(train: Dataset) -> Normalizer:
    """Per-feature z-score with population std; constant features get scale 1."""
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    scale = np.where(std > 0, std, 1.0)
    return Normalizer(mean, scale)


def _split_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    raw = [f * n for f in fractions]
    sizes = [math.floor(r + 1e-9) for r in raw]
    total = min(n, round(sum(raw)))
    # largest remainder
    for i in sorted(range(len(raw)), key=lambda i: -(raw[i] - sizes[i])):
        if sum(sizes) >= total:
            break
        sizes[i] += 1
    return sizes


def split(ds: Dataset, fractions: Sequence[float] = (0.6, 0.2, 0.2),
          seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded stratified shuffle followed by a contiguous train/val/test partition.

    Rows are ordered by their quantile position inside their own (shuffled)
    class, so every contiguous block samples each class proportionally.
    Empty splits are returned as None.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or sum(fractions) <= 0:
        raise FractionError(f"bad split fractions {fractions}")
    if sum(fractions) > 1 + 1e-9:
        raise FractionError(f"split fractions sum to {sum(fractions)} > 1")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    position = np.empty(len(ds))
    for c in range(ds.num_classes):
        members = perm[ds.labels[perm] == c]
        position[members] = (np.arange(len(members)) + 0.5) / max(len(members), 1)
    tiebreak = np.empty(len(ds))
    tiebreak[perm] = np.arange(len(ds))
    order = np.lexsort((tiebreak, position))
    sizes = _split_sizes(len(ds), fractions)
    bounds = np.cumsum([0, *sizes])
    parts = [order[bounds[i]:bounds[i + 1]] for i in range(3)]
    return tuple(ds.take(p) if len(p) else None for p in parts)


def synth_blobs(n_per_class: int, dim: int, classes: int, separation: float,
                seed: int = 0) -> Dataset:
    """Unit-variance Gaussian clusters with pairwise center distance >= separation."""
    if min(n_per_class, dim, classes) < 1 or separation <= 0:
        raise DataError("synth_blobs arguments must be positive")
    rng = np.random.default_rng(seed)
    if classes <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        centers = q[:, :classes].T * (separation / math.sqrt(2.0))
    else:
        centers = rng.standard_normal((classes, dim))
        d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        dmin = d[~np.eye(classes, dtype=bool)].min()
        centers *= separation / dmin
    x = np.concatenate([c + rng.standard_normal((n_per_class, dim)) for c in centers])
    y = np.repeat(np.arange(classes), n_per_class)
    return Dataset(x, y, classes, tuple(f"f{i}" for i in range(dim)))

"""Synthetic datasets, CSV loading and Dirichlet label-skew partitioning."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs must be (n, dim) with one label per row")
        if self.labels.shape[0] and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if np.isnan(self.inputs).any():
            raise ValueError("inputs contain NaN")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def in_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)

    def histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def _class_counts(n: int, num_classes: int) -> np.ndarray:
    counts = np.full(num_classes, n // num_classes)
    counts[: n % num_classes] += 1
    return counts


def gen_synthetic(kind: str, n: int, num_classes: int, in_dim: int, noise: float, seed: int,
                  spread: float = 1.0) -> Dataset:
    """Balanced synthetic classification data.

    ``gaussian_blobs`` places class centroids at ``N(0, spread^2 / in_dim)`` per
    coordinate (so centroid norms are about ``spread``) and adds isotropic
    noise of standard deviation ``noise``. ``two_spirals`` draws ``num_classes``
    interleaved spiral arms in the first two coordinates; extra coordinates
    carry pure noise.
    """
    if num_classes < 2 or n < num_classes:
        raise ValueError(f"need n >= num_classes >= 2, got n={n}, num_classes={num_classes}")
    if in_dim < 2:
        raise ValueError("in_dim must be at least 2")
    if noise < 0 or spread <= 0:
        raise ValueError("noise must be >= 0 and spread > 0")
    rng = np.random.default_rng(seed)
    counts = _class_counts(n, num_classes)
    labels = np.repeat(np.arange(num_classes), counts)

    if kind == "gaussian_blobs":
        centers = rng.normal(0.0, spread / math.sqrt(in_dim), size=(num_classes, in_dim))
        x = centers[labels] + noise * rng.standard_normal((n, in_dim))
    elif kind == "two_spirals":
        t = rng.uniform(0.0, 1.0, size=n)
        radius = spread * (0.1 + t)
        angle = 3.0 * np.pi * t + 2.0 * np.pi * labels / num_classes
        x = noise * rng.standard_normal((n, in_dim))
        x[:, 0] += radius * np.cos(angle)
        x[:, 1] += radius * np.sin(angle)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")

    order = rng.permutation(n)
    return Dataset(x[order], labels[order], num_classes)


def _parse_float(cell: str, line: int, col: int) -> float:
    try:
        return float(cell)
    except ValueError:
        raise ValueError(f"non-numeric cell {cell!r} at row {line}, column {col + 1}") from None


def load_csv(path, label_column: int | str = -1) -> Dataset:
    """Read a comma-separated numeric file.

    A header is assumed when any cell of the first row fails to parse as a
    number. ``label_column`` is a column name (needs a header) or an index.
    Labels are remapped densely to ``0..K-1`` in sorted order of the raw values.
    Row numbers in error messages are 1-based file lines.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such CSV file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [(i, r) for i, r in enumerate(csv.reader(fh), start=1) if r and any(c.strip() for c in r)]
    if not rows:
        raise ValueError(f"{path} is empty")

    header = None
    first = rows[0][1]
    try:
        [float(c) for c in first]
    except ValueError:
        header = [c.strip() for c in first]
        rows = rows[1:]
    if not rows:
        raise ValueError(f"{path} has a header but no data rows")

    width = len(rows[0][1])
    if width < 2:
        raise ValueError("CSV needs at least one feature column besides the label")
    if isinstance(label_column, str):
        if header is None or label_column not in header:
            raise ValueError(f"label column {label_column!r} not found in header")
        col = header.index(label_column)
    else:
        col = label_column if label_column >= 0 else width + label_column
        if not 0 <= col < width:
            raise ValueError(f"label column index {label_column} out of range for {width} columns")

    feats, raw_labels = [], []
    for line, row in rows:
        if len(row) != width:
            raise ValueError(f"row {line} has {len(row)} cells, expected {width}")
        values = [_parse_float(c.strip(), line, j) for j, c in enumerate(row)]
        label = values.pop(col)
        if label != int(label):
            raise ValueError(f"label {row[col]!r} at row {line} is not an integer")
        feats.append(values)
        raw_labels.append(int(label))

    classes = sorted(set(raw_labels))
    index = {c: i for i, c in enumerate(classes)}
    labels = np.array([index[c] for c in raw_labels], dtype=np.int64)
    return Dataset(np.array(feats, dtype=np.float64), labels, len(classes))


@dataclass
class Partition:
    client_indices: list[np.ndarray]
    alpha: float
    seed: int

    @property
    def n_clients(self) -> int:
        return len(self.client_indices)


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    exact = weights * total
    counts = np.floor(exact).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        # stable sort keeps the lowest client index first among equal remainders
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _draw_proportions(rng: np.random.Generator, alpha: float, n_clients: int) -> np.ndarray:
    props = rng.dirichlet(np.full(n_clients, alpha))
    if not np.all(np.isfinite(props)) or props.sum() <= 0:
        props = np.zeros(n_clients)
        props[rng.integers(n_clients)] = 1.0
    return props / props.sum()


def dirichlet_partition(ds: Dataset, n_clients: int, alpha: float, seed: int,
                        min_size: int = 2) -> Partition:
    """Split ``ds`` across clients with per-class ``Dir(alpha)`` proportions.

    Clients below ``min_size`` samples (default 2, enough for one train and one
    test example) are topped up one sample at a time from the most-loaded
    client.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be at least 1")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if len(ds) < n_clients:
        raise ValueError(f"dataset of {len(ds)} samples cannot cover {n_clients} clients")
    min_size = min(min_size, len(ds) // n_clients)
    rng = np.random.default_rng(seed)

    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        counts = _largest_remainder(idx.size, _draw_proportions(rng, alpha, n_clients))
        for k, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            buckets[k].extend(chunk.tolist())

    sizes = np.array([len(b) for b in buckets])
    while sizes.min() < min_size:
        poor = int(np.argmin(sizes))
        rich = int(np.argmax(sizes))
        buckets[poor].append(buckets[rich].pop())
        sizes[poor] += 1
        sizes[rich] -= 1

    return Partition([np.sort(np.array(b, dtype=np.int64)) for b in buckets], float(alpha), seed)


@dataclass
class LocalSplit:
    train: list[Dataset]
    test: list[Dataset]
    global_test: Dataset
    train_indices: list[np.ndarray]
    test_indices: list[np.ndarray]
    warnings: list[str] = field(default_factory=list)


def _stratified_test_mask(labels: np.ndarray, test_fraction: float, rng: np.random.Generator) -> np.ndarray:
    n = labels.shape[0]
    n_test = min(max(1, round(n * test_fraction)), n - 1)
    classes, counts = np.unique(labels, return_counts=True)
    per_class = _largest_remainder(n_test, counts / n)
    mask = np.zeros(n, dtype=bool)
    for c, k in zip(classes, per_class):
        members = rng.permutation(np.flatnonzero(labels == c))
        mask[members[:k]] = True
    return mask


def split_local(partition: Partition, ds: Dataset, test_fraction: float, seed: int) -> LocalSplit:
    """Stratified per-client train/test split; the global test set is the union of local test sets.

    Test counts per class are the largest-remainder apportionment of the
    client's test budget, so each class lands within one sample of
    ``test_fraction`` times its local count. Clients holding a class with a
    single sample cannot match that class across both sides; they are listed
    in ``warnings``.
    """
    if not 0 < test_fraction < 0.5:
        raise ValueError("test_fraction must lie in (0, 0.5)")
    train, test, tr_idx, te_idx, warnings = [], [], [], [], []
    for k, idx in enumerate(partition.client_indices):
        if idx.size < 2:
            raise ValueError(f"client {k} has {idx.size} samples; need at least 2 to split")
        rng = np.random.default_rng([seed, k])
        labels = ds.labels[idx]
        mask = _stratified_test_mask(labels, test_fraction, rng)
        if np.any(np.bincount(labels) == 1):
            warnings.append(f"client {k}: singleton class, stratification is approximate")
        tr_idx.append(idx[~mask])
        te_idx.append(idx[mask])
        train.append(ds.subset(idx[~mask]))
        test.append(ds.subset(idx[mask]))
    global_idx = np.concatenate(te_idx)
    return LocalSplit(train, test, ds.subset(global_idx), tr_idx, te_idx, warnings)


def label_tv_distance(hist: np.ndarray, reference: np.ndarray) -> float:
    """Total-variation distance between two label histograms."""
    p = hist / hist.sum()
    q = reference / reference.sum()
    return 0.5 * float(np.abs(p - q).sum())


def mean_tv_distance(ds: Dataset, partition: Partition) -> float:
    ref = ds.histogram()
    return float(np.mean([
        label_tv_distance(np.bincount(ds.labels[idx], minlength=ds.num_classes), ref)
        for idx in partition.client_indices
    ]))

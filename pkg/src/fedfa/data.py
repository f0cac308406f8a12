"""Datasets, synthetic generation, CSV ingestion and client partitioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

MAX_PARTITION_RETRIES = 100


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus integer class labels in ``[0, n_classes)``."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int = 0

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ConfigError("dataset needs at least one sample and a 2-d feature matrix")
        if y.shape != (X.shape[0],):
            raise ConfigError(f"labels shape {y.shape} does not match {X.shape[0]} samples")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ConfigError("labels must be integer class ids")
        y = y.astype(np.int64)
        if y.min() < 0:
            raise ConfigError("labels must be non-negative")
        n_classes = self.n_classes or int(y.max()) + 1
        if y.max() >= n_classes:
            raise ConfigError(f"label {int(y.max())} outside [0, {n_classes})")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "n_classes", n_classes)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass(frozen=True)
class PartitionPlan:
    """Per-client sample indices. ``alpha`` is None for IID splits."""

    assignments: list[np.ndarray]
    alpha: float | None
    seed: int
    n_samples: int = field(default=0)

    @property
    def n_clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]

    def check(self) -> None:
        """Raise if the plan is not a disjoint cover with nonempty clients."""
        if any(len(a) == 0 for a in self.assignments):
            raise ConfigError("partition has an empty client")
        allidx = np.concatenate(self.assignments)
        if len(allidx) != self.n_samples or not np.array_equal(
            np.sort(allidx), np.arange(self.n_samples)
        ):
            raise ConfigError("partition is not a disjoint cover of the samples")

    def shards(self, ds: Dataset) -> list[Dataset]:
        return [ds.subset(a) for a in self.assignments]


def synth_classification(
    n_samples: int,
    n_features: int,
    n_classes: int,
    cluster_spread: float,
    seed: int,
    class_sep: float = 1.0,
    scale_ratio: float = 1.0,
) -> Dataset:
    """Gaussian class clusters around distinct random means.

    Means are drawn from ``N(0, class_sep^2)`` per coordinate and each sample
    is its class mean plus ``N(0, cluster_spread^2)`` noise. Labels are
    assigned round-robin before shuffling, so classes are balanced.

    ``scale_ratio > 1`` multiplies feature ``j`` by a factor log-spaced from 1
    down to ``1 / scale_ratio``; the resulting ill-conditioning makes
    gradient methods climb in accuracy gradually instead of in a few steps.
    """
    if min(n_samples, n_features, n_classes) < 1:
        raise ConfigError("n_samples, n_features and n_classes must be positive")
    if cluster_spread < 0:
        raise ConfigError("cluster_spread must be non-negative")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, class_sep, size=(n_classes, n_features))
    labels = rng.permutation(np.arange(n_samples) % n_classes)
    noise = rng.normal(0.0, 1.0, size=(n_samples, n_features))
    features = means[labels] + cluster_spread * noise
    if scale_ratio != 1.0:
        if not scale_ratio > 0:
            raise ConfigError("scale_ratio must be positive")
        features = features * np.logspace(0.0, -np.log10(scale_ratio), n_features)
    return Dataset(features, labels, n_classes)


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must be in (0, 1)")
    n_test = max(1, int(round(len(ds) * test_fraction)))
    if n_test >= len(ds):
        raise ConfigError("test split leaves no training samples")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


def iid_partition(ds: Dataset, m: int, seed: int) -> PartitionPlan:
    """Random split into ``m`` shards whose sizes differ by at most one."""
    n = len(ds)
    if not 1 <= m <= n:
        raise ConfigError(f"cannot split {n} samples across {m} clients")
    perm = np.random.default_rng(seed).permutation(n)
    parts = [np.sort(p) for p in np.array_split(perm, m)]
    plan = PartitionPlan(parts, None, seed, n)
    plan.check()
    return plan


def dirichlet_partition(ds: Dataset, m: int, alpha: float, seed: int) -> PartitionPlan:
    """Label-skewed split: each label's samples are divided across clients in
    proportions drawn from ``Dir(alpha * 1_m)``.

    The whole draw is repeated (up to ``MAX_PARTITION_RETRIES`` times) when
    some client ends up with no samples.
    """
    n = len(ds)
    if not 1 <= m <= n:
        raise ConfigError(f"cannot split {n} samples across {m} clients")
    if not alpha > 0:
        raise ConfigError("alpha must be positive")
    rng = np.random.default_rng(seed)
    by_label = [np.flatnonzero(ds.labels == c) for c in range(ds.n_classes)]
    for _ in range(MAX_PARTITION_RETRIES):
        buckets: list[list[np.ndarray]] = [[] for _ in range(m)]
        for idx in by_label:
            if len(idx) == 0:
                continue
            idx = rng.permutation(idx)
            props = rng.dirichlet(np.full(m, alpha))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
            for k, part in enumerate(np.split(idx, cuts)):
                buckets[k].append(part)
        parts = [np.sort(np.concatenate(b)) for b in buckets]
        if all(len(p) > 0 for p in parts):
            plan = PartitionPlan(parts, float(alpha), seed, n)
            plan.check()
            return plan
    raise ConfigError(
        f"dirichlet partition left an empty client after {MAX_PARTITION_RETRIES} draws "
        f"(m={m}, alpha={alpha}, n={n})"
    )


def load_csv(path, label_column: str | int, header: bool = True) -> Dataset:
    """Read a numeric CSV; ``label_column`` is a header name or 0-based index.

    Rows keep file order. Parse failures report the 1-based line number.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise ConfigError(f"{path}: empty file")
    first_line = 1
    if header:
        names = [c.strip() for c in rows[0]]
        rows = rows[1:]
        first_line = 2
        if isinstance(label_column, str) and not label_column.lstrip("-").isdigit():
            if label_column not in names:
                raise ConfigError(f"{path}: no column named {label_column!r}")
            col = names.index(label_column)
        else:
            col = int(label_column)
    else:
        if isinstance(label_column, str) and not label_column.lstrip("-").isdigit():
            raise ConfigError(f"{path}: column names need header=True")
        col = int(label_column)
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    width = len(rows[0])
    if not -width <= col < width:
        raise ConfigError(f"{path}: label column {col} out of range for {width} columns")
    col %= width
    feats, labels = [], []
    for i, row in enumerate(rows):
        line = first_line + i
        if len(row) != width:
            raise ConfigError(f"{path}: row {line} has {len(row)} fields, expected {width}")
        try:
            values = [float(c) for c in row]
        except ValueError as exc:
            raise ConfigError(f"{path}: row {line}: {exc}") from None
        lab = values.pop(col)
        if lab != int(lab) or lab < 0:
            raise ConfigError(f"{path}: row {line}: label {lab} is not a class id")
        feats.append(values)
        labels.append(int(lab))
    return Dataset(np.array(feats, dtype=np.float64).reshape(len(rows), width - 1), np.array(labels))


def label_tv_distance(ds: Dataset, plan: PartitionPlan) -> float:
    """Mean total-variation distance between client and global label histograms."""
    glob = ds.label_histogram() / len(ds)
    dists = []
    for idx in plan.assignments:
        h = np.bincount(ds.labels[idx], minlength=ds.n_classes) / len(idx)
        dists.append(0.5 * np.abs(h - glob).sum())
    return float(np.mean(dists))

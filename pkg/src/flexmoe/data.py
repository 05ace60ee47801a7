"""Synthetic datasets and client partitioners (IID, Dirichlet, class partition)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidParameter

MAX_CLASS_DRAWS = 1000


@dataclass(frozen=True)
class Dataset:
    """Labeled samples: ``features`` is (n, d), ``labels`` is (n,) in [0, num_classes)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise InvalidParameter("features must be (n, d) and labels (n,)")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidParameter("label out of range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class ClientPartition:
    """Disjoint per-client index arrays covering a parent dataset."""

    indices: tuple[np.ndarray, ...]

    @property
    def num_clients(self) -> int:
        return len(self.indices)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.indices], dtype=np.int64)

    def label_sets(self, ds: Dataset) -> list[set[int]]:
        return [set(np.unique(ds.labels[ix]).tolist()) for ix in self.indices]

    def check(self, n: int) -> None:
        """Raise unless the partition is disjoint, covering and has no empty client."""
        allidx = np.concatenate(self.indices) if self.indices else np.array([], dtype=np.int64)
        if len(allidx) != n or not np.array_equal(np.sort(allidx), np.arange(n)):
            raise InvalidParameter("partition is not a disjoint cover of the dataset")
        if np.any(self.sizes == 0):
            raise InvalidParameter("partition has an empty client")


def _finish(chunks: list[list[int]] | list[np.ndarray]) -> ClientPartition:
    return ClientPartition(tuple(np.sort(np.asarray(c, dtype=np.int64)) for c in chunks))


def generate_clustered_dataset(n: int, d: int, K: int, cluster_spread: float, seed: int) -> Dataset:
    """Draw ``n`` points from ``K`` isotropic Gaussian clusters with seeded unit-normal centers.

    Class counts are as equal as possible, so ``n == K`` yields one sample per class.
    """
    if K < 1 or n < K:
        raise InvalidParameter(f"need n >= K >= 1, got n={n}, K={K}")
    if d < 1:
        raise InvalidParameter(f"need d >= 1, got {d}")
    if not cluster_spread > 0:
        raise InvalidParameter(f"cluster_spread must be positive, got {cluster_spread}")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((K, d))
    labels = rng.permutation(np.arange(n) % K)
    features = centers[labels] + cluster_spread * rng.standard_normal((n, d))
    return Dataset(features, labels.astype(np.int64), K)


def partition_iid(ds: Dataset, C: int, seed: int) -> ClientPartition:
    if C < 1 or len(ds) < C:
        raise InvalidParameter(f"need 1 <= C <= |ds|, got C={C}, |ds|={len(ds)}")
    order = np.random.default_rng(seed).permutation(len(ds))
    return _finish([order[c::C] for c in range(C)])


def partition_dirichlet(ds: Dataset, C: int, alpha: float, seed: int) -> ClientPartition:
    """Split every class among clients with Dirichlet(alpha) proportions.

    Empty clients are repaired by moving one sample from the currently largest client.
    """
    if not alpha > 0:
        raise InvalidParameter(f"alpha must be positive, got {alpha}")
    if C < 1 or len(ds) < C:
        raise InvalidParameter(f"need 1 <= C <= |ds|, got C={C}, |ds|={len(ds)}")
    rng = np.random.default_rng(seed)
    chunks: list[list[int]] = [[] for _ in range(C)]
    for k in range(ds.num_classes):
        members = rng.permutation(np.flatnonzero(ds.labels == k))
        if len(members) == 0:
            continue
        props = rng.dirichlet(np.full(C, alpha))
        cuts = (np.cumsum(props)[:-1] * len(members)).astype(np.int64)
        for c, part in enumerate(np.split(members, cuts)):
            chunks[c].extend(part.tolist())
    for c in range(C):
        if not chunks[c]:
            donor = max(range(C), key=lambda j: (len(chunks[j]), -j))
            chunks[c].append(chunks[donor].pop())
    return _finish(chunks)


def partition_classes(ds: Dataset, C: int, classes_per_client: int, seed: int) -> ClientPartition:
    """Give each client ``classes_per_client`` random classes; split each class equally among holders."""
    K = ds.num_classes
    if not 1 <= classes_per_client <= K:
        raise InvalidParameter(f"classes_per_client must be in [1, {K}], got {classes_per_client}")
    if C < 1:
        raise InvalidParameter(f"need C >= 1, got {C}")
    rng = np.random.default_rng(seed)
    for _ in range(MAX_CLASS_DRAWS):
        held = [rng.choice(K, size=classes_per_client, replace=False) for _ in range(C)]
        if len(set(np.concatenate(held).tolist())) == K:
            break
    else:
        raise InvalidParameter(
            f"could not cover {K} classes with {C} clients x {classes_per_client} classes"
        )
    chunks: list[list[int]] = [[] for _ in range(C)]
    for k in range(K):
        holders = [c for c in range(C) if k in held[c]]
        members = rng.permutation(np.flatnonzero(ds.labels == k))
        for c, part in zip(holders, np.array_split(members, len(holders))):
            chunks[c].extend(part.tolist())
    if any(not ch for ch in chunks):
        raise InvalidParameter("class partition left a client without samples")
    return _finish(chunks)


def train_test_split(partition: ClientPartition, test_fraction: float, seed: int):
    """Split each client's indices into (train, test) partitions by seed.

    Clients with a single sample keep it for training and get an empty test set.
    """
    rng = np.random.default_rng(seed)
    train, test = [], []
    for ix in partition.indices:
        ix = rng.permutation(ix)
        n_test = 0 if len(ix) < 2 else min(len(ix) - 1, max(1, int(round(test_fraction * len(ix)))))
        test.append(np.sort(ix[:n_test]))
        train.append(np.sort(ix[n_test:]))
    return ClientPartition(tuple(train)), ClientPartition(tuple(test))


def save_dataset_csv(ds: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"feature_{j}" for j in range(ds.dim)] + ["label"])
        for x, y in zip(ds.features, ds.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])


def load_dataset_csv(path: str | Path, num_classes: int | None = None) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[-1] != "label":
        raise InvalidParameter(f"{path}: last column must be 'label'")
    features = np.array([[float(v) for v in r[:-1]] for r in body], dtype=float).reshape(len(body), len(header) - 1)
    labels = np.array([int(r[-1]) for r in body], dtype=np.int64)
    K = num_classes if num_classes is not None else (int(labels.max()) + 1 if len(labels) else 0)
    return Dataset(features, labels, K)


def save_partition_csv(partition: ClientPartition, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "sample_index"])
        for c, ix in enumerate(partition.indices):
            for i in ix:
                writer.writerow([c, int(i)])


def load_partition_csv(path: str | Path) -> ClientPartition:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        pairs = [(int(r["client_id"]), int(r["sample_index"])) for r in reader]
    C = max(c for c, _ in pairs) + 1 if pairs else 0
    chunks: list[list[int]] = [[] for _ in range(C)]
    for c, i in pairs:
        chunks[c].append(i)
    return _finish(chunks)

"""Synthetic Gaussian-blob classification data and federated partitioners."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .linalg import rng_for

PUBLIC_FRACTION = 0.02
TEST_FRACTION = 0.10


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    ids: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.ids[idx], self.x[idx], self.y[idx])

    @property
    def batch(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x, self.y

    def label_counts(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.y, minlength=num_classes)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "label"] + [f"f{i}" for i in range(self.x.shape[1])])
            for sid, label, row in zip(self.ids, self.y, self.x):
                w.writerow([int(sid), int(label)] + [repr(float(v)) for v in row])


@dataclass(frozen=True)
class SyntheticTask:
    n: int = 16
    num_classes: int = 8
    samples_per_class: int = 250
    noise_std: float = 1.0
    mean_scale: float = 1.0
    seed: int = 0
    class_means: Optional[np.ndarray] = field(default=None, compare=False)

    def means(self) -> np.ndarray:
        if self.class_means is not None:
            return np.asarray(self.class_means, dtype=np.float64)
        rng = rng_for(self.seed, 0)
        return self.mean_scale * rng.standard_normal((self.num_classes, self.n))


@dataclass
class PartitionedDataset:
    shards: list[Dataset]
    public_split: Dataset
    test_split: Dataset

    def all_ids(self) -> list[np.ndarray]:
        return [s.ids for s in self.shards] + [self.public_split.ids, self.test_split.ids]


def generate(task: SyntheticTask) -> Dataset:
    means = task.means()
    if len({tuple(m) for m in means}) != len(means):
        raise ValueError("class means must be pairwise distinct")
    rng = rng_for(task.seed, 1)
    y = np.repeat(np.arange(task.num_classes), task.samples_per_class)
    rng.shuffle(y)
    x = means[y] + task.noise_std * rng.standard_normal((len(y), task.n))
    return Dataset(np.arange(len(y)), x, y)


def _holdout(data: Dataset, rng: np.random.Generator) -> tuple[np.ndarray, Dataset, Dataset]:
    """Reserve public and test splits uniformly at random; return the remaining indices."""
    perm = rng.permutation(len(data))
    n_pub = int(round(PUBLIC_FRACTION * len(data)))
    n_test = int(round(TEST_FRACTION * len(data)))
    public = data.subset(np.sort(perm[:n_pub]))
    test = data.subset(np.sort(perm[n_pub:n_pub + n_test]))
    return perm[n_pub + n_test:], public, test


def partition_iid(data: Dataset, K: int, seed: int) -> PartitionedDataset:
    if K < 1:
        raise PartitionError("need at least one client")
    rng = rng_for(seed, 2)
    pool, public, test = _holdout(data, rng)
    if len(pool) < K:
        raise PartitionError(f"{len(pool)} samples cannot fill {K} shards")
    shards = [data.subset(np.sort(part)) for part in np.array_split(rng.permutation(pool), K)]
    return PartitionedDataset(shards, public, test)


def partition_noniid(data: Dataset, K: int, epsilon: float, seed: int) -> PartitionedDataset:
    """Label-skewed shards mixing a dominant class with a uniform share.

    Each class keeps a fraction ``epsilon`` of its samples in a shared pool
    that is dealt uniformly to all clients; the remaining ``1 - epsilon`` is
    split among the clients for which it is the dominant class (client k ->
    class k mod C). Classes dominant for nobody go wholly to the shared pool.
    ``epsilon = 1`` is IID; ``epsilon = 0`` with K = C gives single-class shards.
    """
    if K < 1:
        raise PartitionError("need at least one client")
    if not 0.0 <= epsilon <= 1.0:
        raise PartitionError(f"epsilon must lie in [0, 1], got {epsilon}")
    num_classes = int(data.y.max()) + 1
    rng = rng_for(seed, 3)
    pool, public, test = _holdout(data, rng)
    holders: dict[int, list[int]] = {c: [] for c in range(num_classes)}
    for k in range(K):
        holders[k % num_classes].append(k)

    parts: list[list[np.ndarray]] = [[] for _ in range(K)]
    shared = []
    for c in range(num_classes):
        idx = rng.permutation(pool[data.y[pool] == c])
        if not holders[c]:
            shared.append(idx)
            continue
        n_dom = int(round((1.0 - epsilon) * len(idx)))
        if len(idx) < len(holders[c]):
            raise PartitionError(
                f"class {c} has {len(idx)} samples, too few to skew {len(holders[c])} clients"
            )
        for k, chunk in zip(holders[c], np.array_split(idx[:n_dom], len(holders[c]))):
            parts[k].append(chunk)
        shared.append(idx[n_dom:])
    shared_idx = rng.permutation(np.concatenate(shared))
    for k, chunk in enumerate(np.array_split(shared_idx, K)):
        parts[k].append(chunk)
    shards = [data.subset(np.sort(np.concatenate(p))) for p in parts]
    if any(len(s) == 0 for s in shards):
        raise PartitionError("partition produced an empty shard")
    return PartitionedDataset(shards, public, test)


def partition_label_skew_two(data: Dataset, K: int, seed: int) -> PartitionedDataset:
    """Every shard holds exactly two labels, assigned cyclically: client k gets {2k, 2k+1} mod C."""
    num_classes = int(data.y.max()) + 1
    if num_classes < 2:
        raise PartitionError("label-skew-2 needs at least two classes")
    if K < 1:
        raise PartitionError("need at least one client")
    rng = rng_for(seed, 4)
    pool, public, test = _holdout(data, rng)
    labels = [((2 * k) % num_classes, (2 * k + 1) % num_classes) for k in range(K)]
    holders: dict[int, list[int]] = {c: [] for c in range(num_classes)}
    for k, pair in enumerate(labels):
        for c in pair:
            holders[c].append(k)
    parts: list[list[np.ndarray]] = [[] for _ in range(K)]
    for c, clients in holders.items():
        if not clients:
            continue
        idx = rng.permutation(pool[data.y[pool] == c])
        if len(idx) < len(clients):
            raise PartitionError(f"class {c} has {len(idx)} samples for {len(clients)} clients")
        for k, chunk in zip(clients, np.array_split(idx, len(clients))):
            parts[k].append(chunk)
    shards = [data.subset(np.sort(np.concatenate(p))) for p in parts]
    return PartitionedDataset(shards, public, test)


def export_csv(partitioned: PartitionedDataset, directory) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for k, shard in enumerate(partitioned.shards):
        shard.to_csv(out / f"client_{k}.csv")
    partitioned.public_split.to_csv(out / "public.csv")
    partitioned.test_split.to_csv(out / "test.csv")

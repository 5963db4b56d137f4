"""Synthetic classification data and label-skewed client partitions."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PARTITION_MODES = ("iid", "pathological", "dirichlet")

_MAGIC = b"FGDS"
_FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")

# Stream tags keep the partition rng independent of every other consumer of the seed.
_TAG_PARTITION = 0x5041
_TAG_SPLIT = 0x5350


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (S, F) float64
    labels: np.ndarray  # (S,) int64
    num_classes: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("features must be (S, F) and labels (S,)")
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def save(self, path) -> None:
        """Write the flat little-endian FGDS format."""
        s, f = self.features.shape
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(_MAGIC, _FORMAT_VERSION, s, f, self.num_classes))
            fh.write(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.labels, dtype="<u2").tobytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        raw = Path(path).read_bytes()
        if len(raw) < _HEADER.size:
            raise ValueError("truncated FGDS header")
        magic, version, s, f, c = _HEADER.unpack_from(raw)
        if magic != _MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if version != _FORMAT_VERSION:
            raise ValueError(f"unsupported FGDS version {version}")
        expected = _HEADER.size + 8 * s * f + 2 * s
        if len(raw) != expected:
            raise ValueError(f"FGDS payload is {len(raw)} bytes, expected {expected}")
        off = _HEADER.size
        feats = np.frombuffer(raw, dtype="<f8", count=s * f, offset=off).reshape(s, f)
        labels = np.frombuffer(raw, dtype="<u2", count=s, offset=off + 8 * s * f)
        return cls(feats.astype(np.float64), labels.astype(np.int64), int(c))


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "dirichlet"
    classes_per_client: int = 2
    beta: float = 0.5
    test_fraction: float = 0.2
    val_fraction: float = 0.0
    # pathological only: classes and clients are cut into this many aligned blocks
    groups: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in PARTITION_MODES:
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")
        if not 0.0 <= self.val_fraction < 1.0 or self.test_fraction + self.val_fraction >= 1.0:
            raise ValueError("val_fraction must be >= 0 and leave room for training data")
        if self.mode == "pathological" and self.classes_per_client < 1:
            raise ValueError("classes_per_client must be >= 1")
        if self.mode == "dirichlet" and not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.groups < 1:
            raise ValueError("groups must be >= 1")


@dataclass
class ClientPartition:
    client_indices: list[np.ndarray]
    train: list[np.ndarray] = field(default_factory=list)
    test: list[np.ndarray] = field(default_factory=list)
    val: list[np.ndarray] = field(default_factory=list)

    @property
    def n_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.client_indices]


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *tags])


def generate_synthetic(
    num_classes: int,
    samples_per_class: int,
    feature_dim: int,
    class_separation: float,
    seed: int,
) -> Dataset:
    """Isotropic Gaussian clusters, one per class.

    Class means are random directions with expected norm ``class_separation``;
    noise has unit variance per coordinate. Samples are ordered by class.
    """
    if min(num_classes, samples_per_class, feature_dim) < 1:
        raise ValueError("counts must be >= 1")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, feature_dim)) / np.sqrt(feature_dim)
    means *= class_separation
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), samples_per_class)
    features = means[labels] + rng.standard_normal((len(labels), feature_dim))
    return Dataset(features, labels, num_classes)


def partition_iid(ds: Dataset, n_clients: int, spec: PartitionSpec) -> ClientPartition:
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if len(ds) < n_clients:
        raise ValueError(f"{len(ds)} samples cannot cover {n_clients} clients")
    perm = _rng(spec.seed, _TAG_PARTITION).permutation(len(ds))
    # array_split puts the larger chunks first
    chunks = np.array_split(perm, n_clients)
    return ClientPartition([np.sort(c) for c in chunks])


def _deal_class_sets(classes: np.ndarray, n_clients: int, per_client: int, rng) -> list[np.ndarray]:
    # consecutive slots over a cycled class permutation: per_client <= len(classes)
    # makes every client's set distinct, n_clients*per_client >= len(classes) covers all
    order = rng.permutation(classes)
    k = len(order)
    return [
        order[(np.arange(per_client) + i * per_client) % k]
        for i in range(n_clients)
    ]


def partition_pathological(ds: Dataset, n_clients: int, spec: PartitionSpec) -> ClientPartition:
    """Each client holds shards from exactly ``classes_per_client`` classes.

    With ``spec.groups > 1`` the classes and the clients are both cut into
    that many contiguous blocks and client block g only draws from class block g.
    """
    cpc = spec.classes_per_client
    if n_clients < spec.groups:
        raise ValueError("fewer clients than groups")
    class_blocks = np.array_split(np.arange(ds.num_classes), spec.groups)
    client_blocks = np.array_split(np.arange(n_clients), spec.groups)
    for cb, kb in zip(class_blocks, client_blocks):
        if cpc > len(cb):
            raise ValueError(
                f"classes_per_client={cpc} exceeds the {len(cb)} classes available to a group"
            )
        if cpc * len(kb) < len(cb):
            raise ValueError(
                f"{len(kb)} clients x {cpc} classes cannot cover {len(cb)} classes"
            )

    rng = _rng(spec.seed, _TAG_PARTITION)
    class_sets: list[np.ndarray] = [None] * n_clients  # type: ignore[list-item]
    for cb, kb in zip(class_blocks, client_blocks):
        for client, cs in zip(kb, _deal_class_sets(cb, len(kb), cpc, rng)):
            class_sets[client] = cs

    holders: dict[int, list[int]] = {c: [] for c in range(ds.num_classes)}
    for client, cs in enumerate(class_sets):
        for c in cs:
            holders[int(c)].append(client)

    buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if not holders[c]:
            raise ValueError(f"class {c} was not dealt to any client")
        if len(idx) < 2 * len(holders[c]):
            raise ValueError(f"class {c} has too few samples for {len(holders[c])} shards")
        idx = rng.permutation(np.sort(idx))
        for client, shard in zip(holders[c], np.array_split(idx, len(holders[c]))):
            buckets[client].append(shard)
    return ClientPartition([np.sort(np.concatenate(b)) for b in buckets])


def _largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    exact = proportions * total
    counts = np.floor(exact).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort: ties go to the lower client index
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition_dirichlet(
    ds: Dataset, n_clients: int, spec: PartitionSpec, min_samples: int = 2
) -> ClientPartition:
    """Per-class client shares drawn from a symmetric Dirichlet(beta)."""
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if len(ds) < min_samples * n_clients:
        raise ValueError(f"{len(ds)} samples cannot give {n_clients} clients {min_samples} each")
    rng = _rng(spec.seed, _TAG_PARTITION)
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    alpha = np.full(n_clients, float(spec.beta))
    for c in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        q = rng.dirichlet(alpha)
        # tiny beta can underflow every component to zero
        if not np.isfinite(q).all() or q.sum() <= 0:
            q = np.zeros(n_clients)
            q[rng.integers(n_clients)] = 1.0
        counts = _largest_remainder(len(idx), q / q.sum())
        for client, part in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            buckets[client].extend(part.tolist())

    # top up starving clients from the currently largest one
    while True:
        sizes = np.array([len(b) for b in buckets])
        poor = np.flatnonzero(sizes < min_samples)
        if len(poor) == 0:
            break
        donor = int(np.argmax(sizes))
        buckets[int(poor[0])].append(buckets[donor].pop())
    return ClientPartition([np.sort(np.asarray(b, dtype=np.int64)) for b in buckets])


def split_train_test(part: ClientPartition, spec: PartitionSpec) -> ClientPartition:
    """Carve a held-out test (and optional validation) set out of each client's data."""
    train, test, val = [], [], []
    for cid, idx in enumerate(part.client_indices):
        n = len(idx)
        if n < 2:
            raise ValueError(f"client {cid} has {n} samples; need at least 2 for a split")
        n_test = min(max(int(round(spec.test_fraction * n)), 1), n - 1)
        n_val = int(round(spec.val_fraction * n)) if spec.val_fraction > 0 else 0
        n_val = min(max(n_val, 1 if spec.val_fraction > 0 else 0), n - n_test - 1)
        shuffled = _rng(spec.seed, _TAG_SPLIT, cid).permutation(idx)
        test.append(np.sort(shuffled[:n_test]))
        val.append(np.sort(shuffled[n_test:n_test + n_val]))
        train.append(np.sort(shuffled[n_test + n_val:]))
    return ClientPartition(part.client_indices, train=train, test=test, val=val)


_PARTITIONERS = {
    "iid": partition_iid,
    "pathological": partition_pathological,
    "dirichlet": partition_dirichlet,
}


def partition(ds: Dataset, n_clients: int, spec: PartitionSpec) -> ClientPartition:
    """Partition by ``spec.mode`` and attach the per-client train/test split."""
    return split_train_test(_PARTITIONERS[spec.mode](ds, n_clients, spec), spec)

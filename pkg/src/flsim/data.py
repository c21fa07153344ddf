"""Synthetic classification tasks, client partitioning, label corruption and persistence.

Binary dataset container (all integers little-endian)::

    b"FLDS1\\n"                    magic, 6 bytes
    u32 n, u32 d, u32 C, u64 seed  header, 20 bytes
    n*d float64                    inputs, row-major
    n   uint32                     labels

Shard assignments are text, one client per line: ``client_id<TAB>i,j,k``.
"""
from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from flsim.errors import ConfigurationError, FormatError
from flsim.nn import Batch
from flsim.seeding import derive_seed

DATASET_MAGIC = b"FLDS1\n"
_HEADER = struct.Struct("<IIIQ")


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    seed: int = 0

    def __post_init__(self):
        x = np.ascontiguousarray(self.inputs, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ConfigurationError(f"dataset inputs must be a non-empty matrix, got {x.shape}")
        if y.shape != (x.shape[0],):
            raise ConfigurationError(f"{x.shape[0]} rows but labels of shape {y.shape}")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ConfigurationError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.inputs.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.n_classes == other.n_classes and self.seed == other.seed
                and self.inputs.shape == other.inputs.shape
                and self.inputs.tobytes() == other.inputs.tobytes()
                and np.array_equal(self.labels, other.labels))

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.inputs[rows], self.labels[rows], self.n_classes, self.seed)

    def batch(self, rows=None) -> Batch:
        if rows is None:
            return Batch(self.inputs, self.labels)
        return Batch(self.inputs[rows], self.labels[rows])


class PartitionKind(str, enum.Enum):
    IID = "iid"
    BY_LABEL = "bylabel"
    DIRICHLET = "dirichlet"


@dataclass
class ShardAssignment:
    shards: dict[int, np.ndarray]
    kind: PartitionKind | None = None
    corruption: dict[int, float] = field(default_factory=dict)

    @property
    def n_clients(self) -> int:
        return len(self.shards)

    def __getitem__(self, client_id: int) -> np.ndarray:
        return self.shards[client_id]

    def sizes(self) -> list[int]:
        return [len(self.shards[c]) for c in sorted(self.shards)]


def gen_gaussian_task(n_classes: int, dim: int, n_per_class: int,
                      separation: float, seed: int) -> Dataset:
    """Isotropic unit-variance blobs around random directions scaled by ``separation``."""
    if n_classes < 2 or dim < 2 or n_per_class < 1:
        raise ConfigurationError(
            f"need n_classes>=2, dim>=2, n_per_class>=1 (got {n_classes}, {dim}, {n_per_class})")
    if not separation > 0:
        raise ConfigurationError(f"separation must be positive, got {separation}")
    if seed < 0:
        raise ConfigurationError("seed must be a non-negative integer")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((n_classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = separation * directions
    labels = np.repeat(np.arange(n_classes), n_per_class)
    inputs = centers[labels] + rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return Dataset(inputs[order], labels[order], n_classes, seed)


def stratified_holdout(dataset: Dataset, fractions: list[float],
                       seed: int) -> list[np.ndarray]:
    """Carve per-class fractions off ``dataset``; the remainder is returned last.

    Each returned array holds row indices, sorted; the arrays are disjoint and cover
    every row.
    """
    if any(f < 0 for f in fractions) or sum(fractions) >= 1.0:
        raise ConfigurationError(f"holdout fractions {fractions} must be >= 0 and sum below 1")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in range(len(fractions) + 1)]
    for c in range(dataset.n_classes):
        rows = rng.permutation(np.flatnonzero(dataset.labels == c))
        start = 0
        for i, f in enumerate(fractions):
            k = int(round(f * rows.size))
            parts[i].append(rows[start:start + k])
            start += k
        parts[-1].append(rows[start:])
    return [np.sort(np.concatenate(p)) for p in parts]


def partition(dataset: Dataset, kind: PartitionKind | str, n_clients: int,
              dirichlet_alpha: float = 1.0, seed: int = 0) -> ShardAssignment:
    kind = PartitionKind(kind)
    if n_clients < 1:
        raise ConfigurationError(f"n_clients must be >= 1, got {n_clients}")
    n = len(dataset)
    if n_clients > n:
        raise ConfigurationError(f"cannot split {n} rows over {n_clients} clients")
    rng = np.random.default_rng(seed)

    if kind is PartitionKind.IID:
        pieces = np.array_split(rng.permutation(n), n_clients)

    elif kind is PartitionKind.BY_LABEL:
        present = np.unique(dataset.labels)
        if n_clients < present.size:
            raise ConfigurationError(
                f"by-label split of {present.size} label groups needs at least as many "
                f"clients, got {n_clients}")
        owners: dict[int, list[int]] = {int(c): [] for c in present}
        for client in range(n_clients):
            owners[int(present[client % present.size])].append(client)
        pieces = [None] * n_clients
        for c, clients in owners.items():
            rows = rng.permutation(np.flatnonzero(dataset.labels == c))
            if rows.size < len(clients):
                raise ConfigurationError(
                    f"label {c} has {rows.size} rows for {len(clients)} clients")
            for client, chunk in zip(clients, np.array_split(rows, len(clients))):
                pieces[client] = chunk

    else:
        if not dirichlet_alpha > 0:
            raise ConfigurationError(f"dirichlet_alpha must be positive, got {dirichlet_alpha}")
        pieces = _dirichlet_split(dataset.labels, n_clients, dirichlet_alpha, rng)

    shards = {k: np.sort(p).astype(np.int64) for k, p in enumerate(pieces)}
    return ShardAssignment(shards, kind)


def _dirichlet_split(labels, n_clients, alpha, rng, max_tries=100):
    classes = np.unique(labels)
    for _ in range(max_tries):
        buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        for c in classes:
            rows = rng.permutation(np.flatnonzero(labels == c))
            props = rng.dirichlet(np.full(n_clients, alpha))
            cuts = (np.cumsum(props) * rows.size).astype(np.int64)[:-1]
            for client, chunk in enumerate(np.split(rows, cuts)):
                buckets[client].append(chunk)
        pieces = [np.concatenate(b) for b in buckets]
        if min(p.size for p in pieces) > 0:
            return pieces
    raise ConfigurationError(
        f"dirichlet split with alpha={alpha} kept producing empty shards for {n_clients} clients")


def corrupt(dataset: Dataset, shard: np.ndarray, noise_rate: float, seed: int) -> Dataset:
    """Copy of ``dataset`` where floor(noise_rate*|shard|) shard rows get a different label."""
    if not 0.0 <= noise_rate <= 1.0:
        raise ConfigurationError(f"noise_rate must lie in [0, 1], got {noise_rate}")
    shard = np.asarray(shard, dtype=np.int64)
    labels = dataset.labels.copy()
    k = int(np.floor(noise_rate * shard.size))
    if k:
        rng = np.random.default_rng(seed)
        rows = rng.choice(shard, size=k, replace=False)
        offsets = rng.integers(1, dataset.n_classes, size=k)
        labels[rows] = (labels[rows] + offsets) % dataset.n_classes
    return Dataset(dataset.inputs, labels, dataset.n_classes, dataset.seed)


def shift_inputs(dataset: Dataset, magnitude: float, seed: int) -> Dataset:
    """Translate every input by ``magnitude`` along one random unit direction."""
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(dataset.dim)
    direction /= np.linalg.norm(direction)
    return Dataset(dataset.inputs + magnitude * direction, dataset.labels,
                   dataset.n_classes, dataset.seed)


def dataset_to_bytes(dataset: Dataset) -> bytes:
    n, d = dataset.inputs.shape
    header = _HEADER.pack(n, d, dataset.n_classes, dataset.seed)
    return b"".join([
        DATASET_MAGIC,
        header,
        dataset.inputs.astype("<f8").tobytes(),
        dataset.labels.astype("<u4").tobytes(),
    ])


def dataset_from_bytes(blob: bytes) -> Dataset:
    magic_len = len(DATASET_MAGIC)
    if blob[:magic_len] != DATASET_MAGIC:
        raise FormatError(f"bad magic: expected {DATASET_MAGIC!r}, found {blob[:magic_len]!r}",
                          offset=0)
    pos = magic_len
    if len(blob) < pos + _HEADER.size:
        raise FormatError("truncated header", offset=len(blob))
    n, d, n_classes, seed = _HEADER.unpack_from(blob, pos)
    pos += _HEADER.size
    expected = pos + 8 * n * d + 4 * n
    if len(blob) < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, got {len(blob)}",
                          offset=len(blob))
    if len(blob) > expected:
        raise FormatError(f"{len(blob) - expected} trailing bytes after payload", offset=expected)
    if n == 0 or d == 0 or n_classes < 1:
        raise FormatError(f"degenerate header n={n} d={d} C={n_classes}", offset=magic_len)
    inputs = np.frombuffer(blob, dtype="<f8", count=n * d, offset=pos).reshape(n, d)
    pos += 8 * n * d
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=pos)
    if labels.max() >= n_classes:
        raise FormatError(f"label {labels.max()} out of range for {n_classes} classes", offset=pos)
    return Dataset(inputs.astype(np.float64), labels.astype(np.int64), int(n_classes), int(seed))


def save(dataset: Dataset, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(dataset))


def load(path: str | os.PathLike) -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


def save_shards(assignment: ShardAssignment, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for client in sorted(assignment.shards):
            rows = ",".join(str(int(i)) for i in assignment.shards[client])
            fh.write(f"{client}\t{rows}\n")


def load_shards(path: str | os.PathLike) -> ShardAssignment:
    shards = {}
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                client, rows = line.split("\t")
                idx = [int(tok) for tok in rows.split(",")] if rows else []
                shards[int(client)] = np.array(idx, dtype=np.int64)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: malformed shard line") from exc
    return ShardAssignment(shards)


@dataclass(frozen=True)
class TaskConfig:
    """Everything needed to regenerate a federated task from one seed."""

    classes: int = 10
    dim: int = 20
    n_clients: int = 100
    samples_per_client: int = 200
    separation: float = 4.0
    partition: PartitionKind = PartitionKind.BY_LABEL
    dirichlet_alpha: float = 0.5
    eval_fraction: float = 0.1
    rehearsal_fraction: float = 0.1
    corrupt_fraction: float = 0.2
    noise_rate: float = 0.8
    pool_shift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "partition", PartitionKind(self.partition))
        if self.n_clients < 1 or self.samples_per_client < 1:
            raise ConfigurationError("n_clients and samples_per_client must be >= 1")
        if not 0.0 <= self.corrupt_fraction <= 1.0:
            raise ConfigurationError(f"corrupt_fraction must lie in [0, 1], got {self.corrupt_fraction}")

    @property
    def n_per_class(self) -> int:
        train_per_class = self.samples_per_client * self.n_clients / self.classes
        keep = 1.0 - self.eval_fraction - self.rehearsal_fraction
        if keep <= 0:
            raise ConfigurationError("eval and rehearsal fractions leave no training data")
        return int(round(train_per_class / keep))


@dataclass
class FederatedTask:
    """Training pool with its client shards, plus disjoint evaluation and rehearsal sets."""

    train: Dataset
    shards: ShardAssignment
    eval_set: Dataset
    rehearsal: Dataset | None

    @property
    def corrupted_clients(self) -> list[int]:
        return sorted(c for c, rate in self.shards.corruption.items() if rate > 0)

    def client_data(self, client_id: int) -> Dataset:
        return self.train.subset(self.shards[client_id])


def build_task(cfg: TaskConfig) -> FederatedTask:
    """Generate, split, partition and corrupt; fully determined by ``cfg.seed``."""
    full = gen_gaussian_task(cfg.classes, cfg.dim, cfg.n_per_class, cfg.separation,
                             derive_seed(cfg.seed, 1))
    eval_rows, rehearsal_rows, train_rows = stratified_holdout(
        full, [cfg.eval_fraction, cfg.rehearsal_fraction], derive_seed(cfg.seed, 2))
    train = full.subset(train_rows)
    shards = partition(train, cfg.partition, cfg.n_clients, cfg.dirichlet_alpha,
                       derive_seed(cfg.seed, 3))

    rng = np.random.default_rng(derive_seed(cfg.seed, 4))
    n_bad = int(round(cfg.corrupt_fraction * cfg.n_clients))
    bad = sorted(int(c) for c in rng.choice(cfg.n_clients, size=n_bad, replace=False))
    for client in bad:
        train = corrupt(train, shards[client], cfg.noise_rate, derive_seed(cfg.seed, 5, client))
    shards.corruption = {c: (cfg.noise_rate if c in bad else 0.0) for c in shards.shards}

    if cfg.pool_shift:
        train = shift_inputs(train, cfg.pool_shift, derive_seed(cfg.seed, 6))
    rehearsal = full.subset(rehearsal_rows) if rehearsal_rows.size else None
    return FederatedTask(train, shards, full.subset(eval_rows), rehearsal)


def save_corruption(assignment: ShardAssignment, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for client in sorted(assignment.shards):
            fh.write(f"{client}\t{assignment.corruption.get(client, 0.0)!r}\n")


def load_corruption(path: str | os.PathLike) -> dict[int, float]:
    rates = {}
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                client, rate = line.rstrip("\n").split("\t")
                rates[int(client)] = float(rate)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: malformed corruption line") from exc
    return rates


TASK_FILES = {"train": "train.flds", "eval": "eval.flds", "rehearsal": "rehearsal.flds",
              "shards": "shards.tsv", "corruption": "corruption.tsv"}


def save_task(task: FederatedTask, directory: str | os.PathLike) -> list[Path]:
    """Write every part of ``task`` into ``directory``; returns the written paths."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / TASK_FILES["train"], out / TASK_FILES["eval"]]
    save(task.train, written[0])
    save(task.eval_set, written[1])
    if task.rehearsal is not None:
        written.append(out / TASK_FILES["rehearsal"])
        save(task.rehearsal, written[-1])
    written += [out / TASK_FILES["shards"], out / TASK_FILES["corruption"]]
    save_shards(task.shards, written[-2])
    save_corruption(task.shards, written[-1])
    return written


def load_task(directory: str | os.PathLike) -> FederatedTask:
    src = Path(directory)
    shards = load_shards(src / TASK_FILES["shards"])
    shards.corruption = load_corruption(src / TASK_FILES["corruption"])
    rehearsal_path = src / TASK_FILES["rehearsal"]
    rehearsal = load(rehearsal_path) if rehearsal_path.exists() else None
    train = load(src / TASK_FILES["train"])
    if shards.shards:
        top = max(int(rows.max(initial=-1)) for rows in shards.shards.values())
        if top >= len(train):
            raise FormatError(f"shard row {top} out of range for {len(train)} training rows")
    return FederatedTask(train, shards, load(src / TASK_FILES["eval"]), rehearsal)

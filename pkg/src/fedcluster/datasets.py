"""Dataset ingestion, partitioning, batching, and synthetic blob generation.

Binary layout (little-endian): magic "FSTC", u32 version=1, u64 n, u32 d,
u8 has_labels, 3 pad bytes, n*d float32 row-major embeddings, then n int32
labels iff has_labels=1. Embeddings are widened to float64 in memory.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DatasetFormatError, InvalidInputError
from .numerics import Rng

MAGIC = b"FSTC"
VERSION = 1
_HEADER = struct.Struct("<4sIQIB3x")


@dataclass
class EmbeddingDataset:
    x: np.ndarray                     # (n, d) float64
    labels: np.ndarray | None = None  # (n,) int labels, optional
    source_name: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise InvalidInputError(f"embeddings must be 2-D, got shape {self.x.shape}")
        if not np.all(np.isfinite(self.x)):
            raise InvalidInputError("embeddings contain non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != self.x.shape[0]:
                raise InvalidInputError(
                    f"{self.labels.shape[0]} labels for {self.x.shape[0]} rows"
                )
            if self.labels.size and self.labels.min() < 0:
                raise InvalidInputError("labels must be nonnegative")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


@dataclass
class PartitionSpec:
    mode: str            # "iid" or "skew"
    m: int               # client count
    rho: int = 0         # non-IID level 0..4; 0 only for iid
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("iid", "skew"):
            raise InvalidInputError(f"unknown partition mode {self.mode!r}")
        if self.mode == "iid":
            if self.rho != 0:
                raise InvalidInputError("iid partition requires rho=0")
            if self.m < 1:
                raise InvalidInputError("need at least one client")
        else:
            if self.m != 2:
                raise InvalidInputError("quantity-skew partition requires m=2")
            if self.rho not in (1, 2, 3, 4):
                raise InvalidInputError("quantity-skew requires rho in {1, 2, 3, 4}")


def save_dataset(ds: EmbeddingDataset, path) -> None:
    path = Path(path)
    has_labels = ds.labels is not None
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, ds.n, ds.d, 1 if has_labels else 0))
        f.write(np.ascontiguousarray(ds.x, dtype="<f4").tobytes())
        if has_labels:
            f.write(np.ascontiguousarray(ds.labels, dtype="<i4").tobytes())


def load_dataset(path, fmt: str = "binary") -> EmbeddingDataset:
    path = Path(path)
    if fmt == "csv":
        return _load_csv(path)
    if fmt != "binary":
        raise InvalidInputError(f"unknown dataset format {fmt!r}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(
            f"file too short for header: {len(raw)} of {_HEADER.size} bytes", offset=len(raw)
        )
    magic, version, n, d, has_labels = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", offset=4)
    offset = _HEADER.size
    emb_bytes = n * d * 4
    if len(raw) < offset + emb_bytes:
        missing = offset + emb_bytes - len(raw)
        raise DatasetFormatError(
            f"truncated embeddings: {missing} bytes missing", offset=len(raw)
        )
    x = np.frombuffer(raw, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    offset += emb_bytes
    labels = None
    if has_labels:
        label_bytes = n * 4
        if len(raw) < offset + label_bytes:
            missing = offset + label_bytes - len(raw)
            raise DatasetFormatError(
                f"truncated labels: {missing} bytes missing", offset=len(raw)
            )
        labels = np.frombuffer(raw, dtype="<i4", count=n, offset=offset).astype(np.int64)
        offset += label_bytes
    if len(raw) != offset:
        raise DatasetFormatError(
            f"{len(raw) - offset} trailing bytes after payload", offset=offset
        )
    return EmbeddingDataset(
        x=x.astype(np.float64), labels=labels, source_name=path.stem
    )


def _load_csv(path: Path) -> EmbeddingDataset:
    """Tiny hand-written fixtures only: header row "n,d", then one row per
    sample with d floats and an optional trailing integer label."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DatasetFormatError("empty csv file")
    try:
        n, d = (int(v) for v in rows[0][:2])
    except (ValueError, IndexError) as exc:
        raise DatasetFormatError(f"bad csv header {rows[0]!r}") from exc
    body = [r for r in rows[1:] if r]
    if len(body) != n:
        raise DatasetFormatError(f"csv declares n={n} but has {len(body)} rows")
    x = np.empty((n, d))
    labels: list[int] | None = [] if body and len(body[0]) == d + 1 else None
    for i, row in enumerate(body):
        want = d + (1 if labels is not None else 0)
        if len(row) != want:
            raise DatasetFormatError(f"csv row {i} has {len(row)} fields, expected {want}")
        x[i] = [float(v) for v in row[:d]]
        if labels is not None:
            labels.append(int(row[d]))
    return EmbeddingDataset(x=x, labels=labels, source_name=path.stem)


def partition_indices(n: int, spec: PartitionSpec) -> list[np.ndarray]:
    """Original-row indices per shard (each ascending), deterministic in seed.

    IID: near-equal sizes with the remainder spread over the first shards.
    Quantity skew (m=2): proportions (0.5 + rho/10, 0.5 - rho/10).
    """
    if spec.m > n:
        raise InvalidInputError(f"cannot split {n} samples over {spec.m} clients")
    order = Rng(spec.seed).child("partition").gen.permutation(n)
    if spec.mode == "iid":
        base, extra = divmod(n, spec.m)
        sizes = [base + (1 if i < extra else 0) for i in range(spec.m)]
    else:
        first = round(n * (0.5 + spec.rho / 10.0))
        sizes = [first, n - first]
    out = []
    start = 0
    for size in sizes:
        out.append(np.sort(order[start:start + size]))
        start += size
    return out


def partition(ds: EmbeddingDataset, spec: PartitionSpec) -> list[EmbeddingDataset]:
    """Shuffle with the seed from the partition spec; shards cover ds disjointly."""
    shards = []
    for i, idx in enumerate(partition_indices(ds.n, spec)):
        shards.append(
            EmbeddingDataset(
                x=ds.x[idx],
                labels=None if ds.labels is None else ds.labels[idx],
                source_name=f"{ds.source_name}/shard{i}",
            )
        )
    return shards


def batches(n: int, batch_size: int, rng: Rng) -> list[np.ndarray]:
    """One epoch of shuffled index batches; the final short batch is kept."""
    if batch_size < 1:
        raise InvalidInputError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.gen.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def synth_blobs(
    k: int, n: int, d: int, separation: float, noise: float, rng: Rng
) -> EmbeddingDataset:
    """Balanced isotropic Gaussian clusters with centers >= separation apart.

    Centers are rejection-sampled from a box that grows if placement stalls,
    so any (k, d, separation) combination terminates.
    """
    if k < 1 or n < k:
        raise InvalidInputError(f"need n >= k >= 1, got n={n}, k={k}")
    half_side = max(separation, 1.0) * max(2.0, k ** (1.0 / d))
    centers = np.empty((k, d))
    placed = 0
    attempts = 0
    while placed < k:
        cand = rng.gen.uniform(-half_side, half_side, size=d)
        if placed == 0 or np.min(
            np.linalg.norm(centers[:placed] - cand, axis=1)
        ) >= separation:
            centers[placed] = cand
            placed += 1
            continue
        attempts += 1
        if attempts % 100 == 0:
            half_side *= 1.5
    base, extra = divmod(n, k)
    labels = np.concatenate(
        [np.full(base + (1 if j < extra else 0), j, dtype=np.int64) for j in range(k)]
    )
    x = centers[labels] + noise * rng.gen.standard_normal((n, d))
    perm = rng.gen.permutation(n)
    return EmbeddingDataset(x=x[perm], labels=labels[perm], source_name="synth_blobs")

"""MNIST IDX ingestion, client sharding and seeded batch sampling."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
DATA_ENV = "FSLGAN_DATA"

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


class IDXError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, 1, 32, 32) float64 in [-1, 1]
    labels: np.ndarray  # (N,) uint8
    raw: np.ndarray | None = None  # (N, 28, 28) uint8 source pixels

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise IDXError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        raw = None if self.raw is None else self.raw[idx]
        return Dataset(self.images[idx], self.labels[idx], raw)


@dataclass(frozen=True)
class Shard:
    client_id: int
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def _read(path: str | Path) -> bytes:
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def parse_idx(data: bytes, magic: int) -> np.ndarray:
    if len(data) < 4:
        raise IDXError("truncated IDX header")
    (got,) = struct.unpack(">I", data[:4])
    if got != magic:
        raise IDXError(f"bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IDXError("truncated IDX header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    expected = int(np.prod(dims))
    if len(data) - header != expected:
        raise IDXError(f"payload has {len(data) - header} bytes, header declares {expected}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def encode_idx(array: np.ndarray) -> bytes:
    """Unsigned-byte IDX encoding of a uint8 array."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def normalize(pixels: np.ndarray, size: int = 32) -> np.ndarray:
    """uint8 (N, h, w) -> float64 (N, 1, size, size) via x/127.5 - 1, zero-padded (pad value -1)."""
    n, h, w = pixels.shape
    top, left = (size - h) // 2, (size - w) // 2
    if top < 0 or left < 0:
        raise IDXError(f"images {h}x{w} larger than target {size}")
    padded = np.zeros((n, size, size), dtype=np.uint8)
    padded[:, top : top + h, left : left + w] = pixels
    return (padded.astype(np.float64) / 127.5 - 1.0)[:, None]


def denormalize(images: np.ndarray) -> np.ndarray:
    return np.round((images + 1.0) * 127.5).astype(np.uint8)


def load_idx(images_path: str | Path, labels_path: str | Path, size: int = 32) -> Dataset:
    pixels = parse_idx(_read(images_path), IMAGE_MAGIC)
    labels = parse_idx(_read(labels_path), LABEL_MAGIC)
    if len(pixels) != len(labels):
        raise IDXError(f"{len(pixels)} images but {len(labels)} labels")
    return Dataset(normalize(pixels, size), labels, pixels)


def data_root(root: str | Path | None = None) -> Path:
    root = root or os.environ.get(DATA_ENV)
    if not root:
        raise FileNotFoundError(f"no dataset directory given and ${DATA_ENV} is unset")
    return Path(root)


def load_mnist(root: str | Path | None = None, split: str = "train") -> Dataset:
    files = TRAIN_FILES if split == "train" else TEST_FILES
    base = data_root(root)
    return load_idx(base / files[0], base / files[1])


# ---------------------------------------------------------------------------


def shard(dataset_or_labels, num_clients: int, mode: str = "iid", seed: int = 0,
          classes_per_client: int = 2) -> list[Shard]:
    """Split item indices among clients.

    ``iid``: seeded shuffle cut into equal contiguous slices (the remainder is dropped).
    ``label_skew``: classes are permuted, then dealt round-robin so each client owns
    ``classes_per_client`` of them; a class shared by several clients is split evenly.
    """
    labels = np.asarray(dataset_or_labels.labels if isinstance(dataset_or_labels, Dataset)
                        else dataset_or_labels)
    n = len(labels)
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if num_clients > n:
        raise ValueError(f"{num_clients} clients for {n} items")
    rng = np.random.default_rng(seed)
    if mode == "iid":
        perm = rng.permutation(n)
        size = n // num_clients
        return [Shard(c, np.sort(perm[c * size : (c + 1) * size])) for c in range(num_clients)]
    if mode != "label_skew":
        raise ValueError(f"unknown shard mode {mode!r}")

    classes = np.unique(labels)
    k = classes_per_client
    if not 1 <= k <= len(classes):
        raise ValueError(f"classes_per_client must be in [1, {len(classes)}]")
    order = rng.permutation(classes)
    owned = [[order[(c * k + j) % len(order)] for j in range(k)] for c in range(num_clients)]
    owners: dict[int, list[int]] = {}
    for c, cls in enumerate(owned):
        for label in cls:
            owners.setdefault(int(label), []).append(c)
    parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for label, clients in sorted(owners.items()):
        idx = rng.permutation(np.flatnonzero(labels == label))
        for c, piece in zip(clients, np.array_split(idx, len(clients))):
            parts[c].append(piece)
    return [Shard(c, np.sort(np.concatenate(p))) for c, p in enumerate(parts)]


def sample_batches(shard_: Shard, batch_size: int = 256, batches: int = 24,
                   epoch_seed: int | Sequence[int] = 0) -> list[np.ndarray]:
    """Index batches drawn uniformly with replacement from the shard."""
    if len(shard_) == 0:
        raise ValueError(f"client {shard_.client_id} has an empty shard")
    rng = np.random.default_rng(epoch_seed)
    picks = rng.integers(0, len(shard_), size=(batches, batch_size))
    return [shard_.indices[row] for row in picks]

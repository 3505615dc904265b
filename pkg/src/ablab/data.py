"""Synthetic datasets, per-rank sharding and an IDX (MNIST-style) loader."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError, IdxFormatError


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels disagree on the number of samples")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx: np.ndarray) -> Dataset:
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)


def standardize(x: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance per feature (constant features left at zero)."""
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (x - mean) / std


def make_teacher_student(seed: int, n_samples: int, in_dim: int, classes: int, hidden: int = 64) -> Dataset:
    """Gaussian inputs labelled by the argmax of a fixed random ReLU MLP.

    The teacher's output biases are tuned so classes come out roughly
    balanced; otherwise a random teacher tends to favour one or two classes.
    """
    if min(n_samples, in_dim, classes, hidden) < 1:
        raise ValueError("all sizes must be positive")
    rng = np.random.default_rng([seed, 0x7EAC])
    x = rng.standard_normal((n_samples, in_dim))
    w1 = rng.standard_normal((hidden, in_dim)) / np.sqrt(in_dim)
    w2 = rng.standard_normal((classes, hidden)) / np.sqrt(hidden)
    z = np.maximum(x @ w1.T, 0.0) @ w2.T
    bias = np.zeros(classes)
    target = n_samples / classes
    for _ in range(100):
        counts = np.bincount(np.argmax(z + bias, axis=1), minlength=classes)
        if counts.max() <= 1.5 * target and counts.min() >= target / 1.5:
            break
        bias -= 0.5 * z.std() * np.log(np.maximum(counts, 1) / target)
    labels = np.argmax(z + bias, axis=1).astype(np.int64)
    return Dataset(standardize(x), labels, classes)


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    n = len(ds)
    n_test = int(round(n * test_fraction))
    perm = np.random.default_rng([seed, 0x5B117]).permutation(n)
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


@lru_cache(maxsize=8)
def _epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    perm.flags.writeable = False
    return perm


@dataclass(frozen=True)
class ShardPlan:
    """Which samples each rank sees at each step.

    A step's global batch is a contiguous slice of a permutation seeded by
    ``(seed, epoch)``; positions within it are dealt to ranks round-robin, so
    the global batch depends only on ``(seed, step, global batch size)``.
    """

    n_samples: int
    world_size: int
    local_batch: int
    seed: int = 0

    def __post_init__(self):
        if self.world_size < 1 or self.local_batch < 1:
            raise ConfigError("world_size and local_batch must be >= 1")
        if self.n_samples < self.global_batch:
            raise ConfigError(
                f"dataset of {self.n_samples} samples cannot fill a global batch of {self.global_batch}"
            )

    @property
    def global_batch(self) -> int:
        return self.world_size * self.local_batch

    @property
    def steps_per_epoch(self) -> int:
        return self.n_samples // self.global_batch

    def _permutation(self, epoch: int) -> np.ndarray:
        return _epoch_permutation(self.n_samples, self.seed, epoch)

    def global_indices(self, step: int) -> np.ndarray:
        epoch, offset = divmod(step, self.steps_per_epoch)
        start = offset * self.global_batch
        return self._permutation(epoch)[start : start + self.global_batch]

    def local_indices(self, rank: int, step: int) -> np.ndarray:
        if not 0 <= rank < self.world_size:
            raise ValueError(f"rank {rank} outside world of size {self.world_size}")
        return self.global_indices(step)[rank :: self.world_size]


def next_local_batch(ds: Dataset, plan: ShardPlan, rank: int, step: int) -> tuple[np.ndarray, np.ndarray]:
    idx = plan.local_indices(rank, step)
    return ds.inputs[idx], ds.labels[idx]


# -- IDX ---------------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.str[1:]: k for k, v in _IDX_DTYPES.items()}


def read_idx(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise IdxFormatError(f"{path}: not an IDX file")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_DTYPES:
        raise IdxFormatError(f"{path}: unknown IDX type code 0x{code:02x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = _IDX_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) - header != expected:
        raise IdxFormatError(f"{path}: expected {expected} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    big = array.dtype.newbyteorder(">")
    key = big.str[1:] if array.dtype.itemsize > 1 else array.dtype.str[1:]
    if key not in _IDX_CODES:
        raise IdxFormatError(f"dtype {array.dtype} is not representable in IDX")
    header = bytes([0, 0, _IDX_CODES[key], array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(big).tobytes())


def load_idx_dataset(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Images as ``(N, 1, H, W)`` standardized floats plus integer labels."""
    images = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64)
    if images.ndim != 3 or labels.ndim != 1:
        raise IdxFormatError("expected 3-D images and 1-D labels")
    n, h, w = images.shape
    flat = standardize(images.reshape(n, -1).astype(np.float64))
    classes = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(flat.reshape(n, 1, h, w), labels, classes)

"""Fitness suppliers: benchmark functions, datasets and seeded mini-batches."""

from __future__ import annotations

import csv
import enum
import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class BenchmarkKind(str, enum.Enum):
    SPHERE = "sphere"
    ROSENBROCK = "rosenbrock"


@dataclass(frozen=True)
class BenchmarkFn:
    kind: BenchmarkKind
    dim: int

    def __post_init__(self):
        object.__setattr__(self, "kind", BenchmarkKind(self.kind))
        if self.dim < 1 or (self.kind is BenchmarkKind.ROSENBROCK and self.dim < 2):
            raise ValueError(f"invalid dimension {self.dim} for {self.kind.value}")

    def __call__(self, theta, data_seed=None) -> float:
        return eval_benchmark(self, theta)


def eval_benchmark(fn: BenchmarkFn, theta) -> float:
    """Maximisation convention: the optimum scores exactly 0."""
    x = np.asarray(theta, dtype=np.float64)
    if x.shape != (fn.dim,):
        raise ValueError(f"expected length {fn.dim}, got shape {x.shape}")
    if fn.kind is BenchmarkKind.SPHERE:
        return -float(np.dot(x, x))
    a, b = x[:-1], x[1:]
    return -float(np.sum(100.0 * (b - a * a) ** 2 + (1.0 - a) ** 2))


# --- IDX ------------------------------------------------------------------

class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


def _open(path):
    path = os.fspath(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Read an unsigned-byte IDX file into an array of its declared shape."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: header truncated ({len(raw)} of {header} bytes)")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise IdxTruncatedError(f"{path}: expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array, magic: int):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    if magic & 0xFF != array.ndim:
        raise ValueError("magic dimension byte does not match array rank")
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def load_mnist_idx(images_path, labels_path):
    """Return ``(images in [0, 1] as float32 (N, rows, cols), int64 labels)``."""
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images.astype(np.float32) / 255.0, labels.astype(np.int64)


# --- datasets -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    num_classes: int
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise ValueError("train and test splits overlap")

    @property
    def n_features(self) -> int:
        return self.x.shape[1]

    @property
    def train(self):
        return self.x[self.train_idx], self.y[self.train_idx]

    @property
    def test(self):
        return self.x[self.test_idx], self.y[self.test_idx]

    def subset(self, n_train=None, n_test=None, seed=0) -> "Dataset":
        """Random train/test subsets (sorted indices)."""
        rng = np.random.default_rng(seed)
        tr, te = self.train_idx, self.test_idx
        if n_train is not None and n_train < tr.size:
            tr = np.sort(rng.choice(tr, n_train, replace=False))
        if n_test is not None and n_test < te.size:
            te = np.sort(rng.choice(te, n_test, replace=False))
        return Dataset(self.x, self.y, tr, te, self.num_classes,
                       {**self.source, "n_train": int(tr.size), "n_test": int(te.size)})


def load_mnist(directory) -> Dataset:
    """Load the four standard MNIST IDX files from ``directory`` (60k train / 10k test)."""
    def find(stem):
        for name in (stem, stem + ".gz"):
            p = os.path.join(directory, name)
            if os.path.exists(p):
                return p
        raise FileNotFoundError(os.path.join(directory, stem))

    xtr, ytr = load_mnist_idx(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"))
    xte, yte = load_mnist_idx(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"))
    x = np.concatenate([xtr.reshape(len(xtr), -1), xte.reshape(len(xte), -1)])
    y = np.concatenate([ytr, yte])
    ntr = len(xtr)
    return Dataset(x, y, np.arange(ntr), np.arange(ntr, len(x)), 10,
                   {"kind": "mnist", "path": os.fspath(directory)})


def _split(n, test_fraction, seed):
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def two_moons(count: int = 2000, noise: float = 0.15, seed: int = 0,
              test_fraction: float = 0.25) -> Dataset:
    from sklearn.datasets import make_moons

    x, y = make_moons(n_samples=count, noise=noise, random_state=seed)
    tr, te = _split(count, test_fraction, seed)
    return Dataset(x.astype(np.float64), y.astype(np.int64), tr, te, 2,
                   {"kind": "two_moons", "count": count, "noise": noise, "seed": seed})


def blobs(count: int = 2000, centers: int = 3, seed: int = 0, n_features: int = 2,
          test_fraction: float = 0.25) -> Dataset:
    from sklearn.datasets import make_blobs

    x, y = make_blobs(n_samples=count, centers=centers, n_features=n_features, random_state=seed)
    tr, te = _split(count, test_fraction, seed)
    return Dataset(x.astype(np.float64), y.astype(np.int64), tr, te, centers,
                   {"kind": "blobs", "count": count, "centers": centers, "seed": seed})


def export_csv(dataset: Dataset, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"x{j}" for j in range(dataset.n_features)] + ["label"])
        for row, label in zip(dataset.x, dataset.y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


@dataclass(frozen=True)
class BatchSpec:
    size: int = 256
    data_seed: int = 0

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("batch size must be >= 1")


def batch_indices(dataset: Dataset, spec: BatchSpec) -> np.ndarray:
    if spec.size > dataset.train_idx.size:
        raise ValueError(f"batch of {spec.size} exceeds {dataset.train_idx.size} training examples")
    rng = np.random.default_rng(int(spec.data_seed))
    return dataset.train_idx[rng.choice(dataset.train_idx.size, spec.size, replace=False)]


def make_batch(dataset: Dataset, spec: BatchSpec):
    """``(x, y)`` of ``spec.size`` distinct training examples chosen by ``data_seed``."""
    idx = batch_indices(dataset, spec)
    return dataset.x[idx], dataset.y[idx]

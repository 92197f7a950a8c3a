"""
Dataset loading and mini-batch iteration.
Image inputs are channel-last float64 arrays scaled to [0, 1].
"""
import gzip
import logging
import os
import struct
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from bnplab.errors import BatchSizeError, DataFormatError, ShapeError
from bnplab.linalg import make_rng

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ShapeError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, count: int) -> "Dataset":
        return Dataset(self.inputs[:count], self.labels[:count], self.num_classes)


def _read_bytes(path: str) -> bytes:
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def load_idx(path: str) -> np.ndarray:
    """
    Parse an IDX file of unsigned bytes. Images (magic 0x803) come back as
    float64 scaled to [0, 1], labels (magic 0x801) as int64.
    """
    data = _read_bytes(path)
    if len(data) < 4:
        raise DataFormatError(f"{path}: truncated header", offset=len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if magic not in (IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC):
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}", offset=0)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise DataFormatError(f"{path}: truncated dimension header", offset=len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    expected = int(np.prod(dims))
    if len(data) - header_end < expected:
        raise DataFormatError(
            f"{path}: expected {expected} payload bytes, found {len(data) - header_end}", offset=len(data)
        )
    raw = np.frombuffer(data, dtype=np.uint8, count=expected, offset=header_end).reshape(dims)
    if magic == IDX_IMAGE_MAGIC:
        return raw.astype(np.float64) / 255.0
    return raw.astype(np.int64)


def _find(directory: str, stem: str) -> str:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        path = os.path.join(directory, name)
        if os.path.exists(path):
            return path
    raise DataFormatError(f"{stem} not found in {directory}")


def load_mnist(
    dataset_dir: str, train_subset: int = 10000, test_subset: int = 2000, full: bool = False
) -> Tuple[Dataset, Dataset]:
    """MNIST train/test sets as N x 28 x 28 inputs; the first samples form the desk-scale subsets."""
    parts = {key: load_idx(_find(dataset_dir, stem)) for key, stem in MNIST_FILES.items()}
    train = Dataset(parts["train_images"], parts["train_labels"], 10)
    test = Dataset(parts["test_images"], parts["test_labels"], 10)
    if not full:
        train, test = train.subset(train_subset), test.subset(test_subset)
    logger.info(f"Loaded MNIST from {dataset_dir}: {len(train)} train, {len(test)} test")
    return train, test


def to_channel_last(x: np.ndarray) -> np.ndarray:
    """N x c x r x s -> N x r x s x c."""
    return np.ascontiguousarray(np.transpose(x, (0, 2, 3, 1)))


def to_channel_first(x: np.ndarray) -> np.ndarray:
    """N x r x s x c -> N x c x r x s."""
    return np.ascontiguousarray(np.transpose(x, (0, 3, 1, 2)))


def load_cifar10_bin(path: str) -> Dataset:
    """Records of 1 label byte + 3072 channel-planar pixel bytes (R, G, B planes of 32 x 32)."""
    data = _read_bytes(path)
    remainder = len(data) % CIFAR_RECORD_BYTES
    if remainder:
        raise DataFormatError(
            f"{path}: size {len(data)} is not a multiple of {CIFAR_RECORD_BYTES}", offset=len(data) - remainder
        )
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataFormatError(f"{path}: label {labels[bad]} out of range", offset=bad * CIFAR_RECORD_BYTES)
    planar = records[:, 1:].reshape(-1, 3, 32, 32)
    return Dataset(to_channel_last(planar).astype(np.float64) / 255.0, labels, 10)


def _concat(parts: Sequence[Dataset]) -> Dataset:
    return Dataset(
        np.concatenate([p.inputs for p in parts]), np.concatenate([p.labels for p in parts]), parts[0].num_classes
    )


def load_cifar10(
    dataset_dir: str, train_subset: int = 10000, test_subset: int = 2000, full: bool = False
) -> Tuple[Dataset, Dataset]:
    directory = dataset_dir
    nested = os.path.join(dataset_dir, "cifar-10-batches-bin")
    if os.path.isdir(nested):
        directory = nested
    train_paths = [os.path.join(directory, f"data_batch_{i}.bin") for i in range(1, 6)]
    if not full:
        # the first batch already holds 10000 records
        needed = max(1, -(-train_subset // 10000))
        train_paths = train_paths[:needed]
    for path in train_paths + [os.path.join(directory, "test_batch.bin")]:
        if not os.path.exists(path):
            raise DataFormatError(f"CIFAR-10 file not found: {path}")
    train = _concat([load_cifar10_bin(p) for p in train_paths])
    test = load_cifar10_bin(os.path.join(directory, "test_batch.bin"))
    if not full:
        train, test = train.subset(train_subset), test.subset(test_subset)
    logger.info(f"Loaded CIFAR-10 from {directory}: {len(train)} train, {len(test)} test")
    return train, test


def synth_illconditioned(n_features: int, N: int, scale_decades: float, seed: int) -> Dataset:
    """
    Gaussian features whose standard deviations are spread log-uniformly over
    [1, 10^scale_decades] in shuffled order; labels from a random linear rule
    on the standardized features.
    """
    if scale_decades < 0:
        raise ShapeError(f"scale_decades must be >= 0, got {scale_decades}")
    rng = make_rng(seed)
    stds = rng.permutation(np.logspace(0.0, scale_decades, n_features))
    z = rng.standard_normal((N, n_features))
    direction = rng.standard_normal(n_features)
    labels = (z @ direction > 0.0).astype(np.int64)
    return Dataset(z * stds, labels, 2)


def train_test_split(dataset: Dataset, test_fraction: float = 0.2) -> Tuple[Dataset, Dataset]:
    cut = len(dataset) - int(round(len(dataset) * test_fraction))
    return (
        Dataset(dataset.inputs[:cut], dataset.labels[:cut], dataset.num_classes),
        Dataset(dataset.inputs[cut:], dataset.labels[cut:], dataset.num_classes),
    )


@dataclass
class BatchIterator:
    """
    Seeded shuffled mini-batches. The order of epoch e depends only on (seed, e).
    A short final batch is kept unless drop_last is set.
    """
    dataset: Dataset
    batch_size: int
    seed: int = 0
    drop_last: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise BatchSizeError(f"batch size must be >= 1, got {self.batch_size}")
        if self.batch_size > len(self.dataset):
            raise BatchSizeError(f"batch size {self.batch_size} exceeds dataset size {len(self.dataset)}")

    def __len__(self) -> int:
        full, rest = divmod(len(self.dataset), self.batch_size)
        return full + (1 if rest and not self.drop_last else 0)

    def order(self, epoch: int) -> np.ndarray:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, epoch])))
        return rng.permutation(len(self.dataset))

    def epoch(self, epoch: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        idx = self.order(epoch)
        for start in range(0, len(idx), self.batch_size):
            chunk = idx[start:start + self.batch_size]
            if self.drop_last and chunk.size < self.batch_size:
                break
            yield self.dataset.inputs[chunk], self.dataset.labels[chunk]


def batches(dataset: Dataset, N: int, seed: int, epoch: int = 0) -> List[Tuple[np.ndarray, np.ndarray]]:
    return list(BatchIterator(dataset, N, seed).epoch(epoch))


def save_dataset_cache(path: str, dataset: Dataset) -> str:
    if not path.endswith(".npz"):
        path = path + ".npz"
    np.savez(path, inputs=dataset.inputs, labels=dataset.labels, num_classes=np.array(dataset.num_classes))
    return path


def load_dataset_cache(path: str) -> Dataset:
    with np.load(path) as archive:
        return Dataset(archive["inputs"].copy(), archive["labels"].copy(), int(archive["num_classes"]))


def load_datasets(
    name: str,
    dataset_dir: str,
    train_subset: int = 10000,
    test_subset: int = 2000,
    full: bool = False,
    n_features: int = 20,
    scale_decades: float = 3.0,
    synth_samples: int = 2000,
    seed: int = 0,
    cache_dir: Optional[str] = None,
) -> Tuple[Dataset, Dataset]:
    """Train and test sets by dataset name ("mnist", "cifar10" or "synth")."""
    if name == "synth":
        return train_test_split(synth_illconditioned(n_features, synth_samples, scale_decades, seed))
    loader = {"mnist": load_mnist, "cifar10": load_cifar10}.get(name)
    if loader is None:
        raise DataFormatError(f"unknown dataset {name}")
    if cache_dir:
        tag = "full" if full else f"{train_subset}-{test_subset}"
        paths = [os.path.join(cache_dir, f"{name}-{tag}-{part}.npz") for part in ("train", "test")]
        if all(os.path.exists(p) for p in paths):
            logger.info(f"Using cached {name} arrays from {cache_dir}")
            return load_dataset_cache(paths[0]), load_dataset_cache(paths[1])
        train, test = loader(dataset_dir, train_subset, test_subset, full)
        os.makedirs(cache_dir, exist_ok=True)
        save_dataset_cache(paths[0], train)
        save_dataset_cache(paths[1], test)
        return train, test
    return loader(dataset_dir, train_subset, test_subset, full)

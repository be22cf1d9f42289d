"""Dataset ingestion: MNIST IDX and CIFAR-10 binary formats, channel
standardization, training-time augmentation, and deterministic batching.

Datasets are consumed from local files; nothing here talks to the network.
When files are missing the loaders raise DataNotFoundError whose message
carries retrieval instructions.
"""

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataNotFoundError, FormatError

_F32 = np.float32

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3*32*32 pixels

MNIST_MEAN = (0.1307,)
MNIST_STD = (0.3081,)
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

_RETRIEVAL_NOTE = (
    "place the files under the data directory (flag --data-dir or env "
    "QCNN_DATA_DIR); MNIST needs the four IDX files (train-images-idx3-ubyte, "
    "train-labels-idx1-ubyte, t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte, "
    "optionally .gz), CIFAR-10 needs the binary batches (cifar-10-batches-bin/"
    "data_batch_1..5.bin and test_batch.bin)"
)


@dataclass
class Dataset:
    """Images are [N,C,H,W] float32, standardized per channel; labels are
    int64 class ids."""

    images: np.ndarray
    labels: np.ndarray
    split: str
    name: str

    def __len__(self):
        return self.images.shape[0]

    def subset(self, n, seed=0):
        """A class-stratified-ish deterministic head sample of n items."""
        idx = np.random.default_rng(seed).permutation(len(self))[:n]
        return Dataset(self.images[idx], self.labels[idx], self.split, self.name)


def _open_maybe_gz(path):
    if path.endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _find_file(directory, stem):
    for candidate in (stem, stem + ".gz"):
        p = os.path.join(directory, candidate)
        if os.path.exists(p):
            return p
    return None


def _read_idx(path, expected_magic):
    with _open_maybe_gz(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header (only {len(raw)} bytes)")
    (magic,) = struct.unpack(">i", raw[:4])
    if magic != expected_magic:
        raise FormatError(
            f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}i", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise FormatError(
            f"{path}: payload is {len(raw) - header} bytes, dimensions {dims} need {count}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def _standardize(images, mean, std):
    mean = np.asarray(mean, dtype=_F32).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=_F32).reshape(1, -1, 1, 1)
    return (images - mean) / std


def load_mnist(directory):
    """Parse the four IDX files into standardized train/test datasets."""
    paths = {}
    for key, stem in MNIST_FILES.items():
        p = _find_file(directory, stem)
        if p is None:
            raise DataNotFoundError(
                f"MNIST file {stem}(.gz) not found in {directory}; {_RETRIEVAL_NOTE}"
            )
        paths[key] = p

    out = []
    for split in ("train", "test"):
        imgs = _read_idx(paths[f"{split}_images"], IDX_IMAGE_MAGIC)
        labels = _read_idx(paths[f"{split}_labels"], IDX_LABEL_MAGIC)
        if imgs.shape[0] != labels.shape[0]:
            raise FormatError(
                f"MNIST {split}: {imgs.shape[0]} images but {labels.shape[0]} labels"
            )
        imgs = imgs.reshape(-1, 1, 28, 28).astype(_F32) / 255.0
        imgs = _standardize(imgs, MNIST_MEAN, MNIST_STD)
        out.append(Dataset(imgs, labels.astype(np.int64), split, "mnist"))
    return out[0], out[1]


def _cifar_batch_paths(directory):
    sub = os.path.join(directory, "cifar-10-batches-bin")
    base = sub if os.path.isdir(sub) else directory
    train = [os.path.join(base, f"data_batch_{i}.bin") for i in range(1, 6)]
    test = [os.path.join(base, "test_batch.bin")]
    return train, test


def _read_cifar_records(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) % CIFAR_RECORD_BYTES:
        raise FormatError(
            f"{path}: length {len(raw)} is not a multiple of the "
            f"{CIFAR_RECORD_BYTES}-byte record"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(directory):
    """Parse the six binary batch files into standardized datasets."""
    train_paths, test_paths = _cifar_batch_paths(directory)
    for p in train_paths + test_paths:
        if not os.path.exists(p):
            raise DataNotFoundError(f"CIFAR-10 file {p} not found; {_RETRIEVAL_NOTE}")

    out = []
    for split, paths in (("train", train_paths), ("test", test_paths)):
        parts = [_read_cifar_records(p) for p in paths]
        imgs = np.concatenate([im for im, _ in parts]).astype(_F32) / 255.0
        labels = np.concatenate([lb for _, lb in parts])
        imgs = _standardize(imgs, CIFAR10_MEAN, CIFAR10_STD)
        out.append(Dataset(imgs, labels, split, "cifar10"))
    return out[0], out[1]


def load_dataset(name, directory):
    if name == "mnist":
        return load_mnist(directory)
    if name == "cifar10":
        return load_cifar10(directory)
    raise DataNotFoundError(f"unknown dataset {name!r}; expected mnist or cifar10")


def augment(batch, dataset_name, rng):
    """Training-set augmentation. CIFAR-10: 4-pixel zero-pad, random 32x32
    crop, horizontal flip with p=0.5. MNIST (and anything else): identity."""
    if dataset_name != "cifar10":
        return batch
    n, c, h, w = batch.shape
    padded = np.zeros((n, c, h + 8, w + 8), dtype=batch.dtype)
    padded[:, :, 4 : 4 + h, 4 : 4 + w] = batch
    out = np.empty_like(batch)
    offs = rng.integers(0, 9, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        oy, ox = offs[i]
        crop = padded[i, :, oy : oy + h, ox : ox + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


class BatchIterator:
    """Seed-deterministic shuffled batches; one epoch covers every sample
    exactly once."""

    def __init__(self, dataset, batch_size, seed=0, augment_train=False):
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.augment_train = augment_train and dataset.split == "train"

    def epoch(self, epoch_index):
        n = len(self.dataset)
        rng = np.random.default_rng((self.seed, epoch_index))
        order = rng.permutation(n)
        for start in range(0, n, self.batch_size):
            idx = order[start : start + self.batch_size]
            images = self.dataset.images[idx]
            if self.augment_train:
                images = augment(images, self.dataset.name, rng)
            yield images, self.dataset.labels[idx]

    def batches_per_epoch(self):
        n = len(self.dataset)
        return (n + self.batch_size - 1) // self.batch_size

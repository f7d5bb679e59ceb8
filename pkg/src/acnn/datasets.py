"""MNIST / CIFAR-10 readers, IDX writer, cluttered-MNIST generator, batching.

Images are kept as raw ``uint8`` pixels in ``[N, C, H, W]`` and scaled to
``[0, 1]`` on demand, so loaders can be checked bit-exactly.
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
MNIST_TRAIN_COUNT = 50_000
NUM_CLASSES = 10

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


class DatasetFormatError(ValueError):
    """Base class for malformed dataset files."""


class BadMagicError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class CountMismatchError(DatasetFormatError):
    pass


class LabelRangeError(DatasetFormatError):
    pass


class RecordLengthError(DatasetFormatError):
    pass


class MissingDataError(FileNotFoundError):
    pass


@dataclass
class LabeledImageSet:
    pixels: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 4:
            raise ValueError(f"pixels must be uint8 [N,C,H,W], got {self.pixels.dtype} {self.pixels.shape}")
        if len(self.pixels) != len(self.labels):
            raise CountMismatchError(f"{len(self.pixels)} images but {len(self.labels)} labels")
        if len(self.labels) and self.labels.max() >= NUM_CLASSES:
            raise LabelRangeError(f"label {int(self.labels.max())} outside 0..{NUM_CLASSES - 1}")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.pixels.shape[1:]

    def images(self, dtype=np.float32, index=None):
        px = self.pixels if index is None else self.pixels[index]
        return px.astype(dtype) / dtype(255.0)

    def subset(self, index):
        return LabeledImageSet(self.pixels[index], self.labels[index], self.name)

    def head(self, n):
        return self if n is None or n >= len(self) else self.subset(slice(0, n))


def _read_bytes(path):
    path = Path(path)
    if not path.exists():
        raise MissingDataError(f"no such file: {path}")
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def _parse_idx(data, magic, path):
    if len(data) < 8:
        raise TruncatedFileError(f"{path}: truncated header")
    got = struct.unpack(">I", data[:4])[0]
    if got != magic:
        raise BadMagicError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedFileError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    need = int(np.prod(dims))
    if len(data) - header < need:
        raise TruncatedFileError(f"{path}: truncated payload, {len(data) - header} of {need} bytes")
    if len(data) - header > need:
        raise RecordLengthError(f"{path}: {len(data) - header - need} trailing bytes after payload")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path, name="mnist"):
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if len(images) != len(labels):
        raise CountMismatchError(f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels")
    if len(labels) and labels.max() >= NUM_CLASSES:
        raise LabelRangeError(f"{labels_path}: label {int(labels.max())} outside 0..9")
    return LabeledImageSet(images[:, None].copy(), labels.astype(np.int64), name)


def write_idx(images_path, labels_path, dataset):
    """Write single-channel images and labels as uncompressed IDX files."""
    if dataset.pixels.shape[1] != 1:
        raise ValueError("IDX image files hold single-channel images only")
    n, _, h, w = dataset.pixels.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(np.ascontiguousarray(dataset.pixels[:, 0]).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def load_cifar10_binary(paths, name="cifar10"):
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    pixels, labels = [], []
    for path in paths:
        data = _read_bytes(path)
        if len(data) == 0 or len(data) % CIFAR_RECORD:
            raise RecordLengthError(f"{path}: length {len(data)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if rec[:, 0].max() >= NUM_CLASSES:
            raise LabelRangeError(f"{path}: label {int(rec[:, 0].max())} outside 0..9")
        labels.append(rec[:, 0].astype(np.int64))
        pixels.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    return LabeledImageSet(np.concatenate(pixels), np.concatenate(labels), name)


def write_cifar10_binary(path, dataset):
    if dataset.pixels.shape[1:] != (3, 32, 32):
        raise ValueError(f"CIFAR records are 3x32x32, got {dataset.pixels.shape[1:]}")
    rec = np.empty((len(dataset), CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = dataset.labels
    rec[:, 1:] = dataset.pixels.reshape(len(dataset), -1)
    Path(path).write_bytes(rec.tobytes())


def generate_cluttered_mnist(source, count, distractors=6, seed=0, size=60, crop=8, return_positions=False):
    """Place each source digit on a black ``size x size`` canvas with clutter.

    Output ``i`` carries digit ``i mod len(source)`` at a uniform position
    plus ``distractors`` random ``crop x crop`` patches cut from other
    digits. Overlaps combine by pixel-wise max.
    """
    src = source.pixels[:, 0]
    n_src, h, w = src.shape
    if size < max(h, w) or crop > min(h, w):
        raise ValueError("canvas must fit the digit and crops must fit inside a digit")
    rng = np.random.default_rng(seed)
    out = np.zeros((count, 1, size, size), dtype=np.uint8)
    labels = np.empty(count, dtype=np.int64)
    positions = np.empty((count, 2), dtype=np.int64)
    for i in range(count):
        j = i % n_src
        canvas = out[i, 0]
        for _ in range(distractors):
            other = int(rng.integers(n_src - 1)) if n_src > 1 else 0
            if n_src > 1 and other >= j:
                other += 1
            cy, cx = rng.integers(0, h - crop + 1), rng.integers(0, w - crop + 1)
            py, px = rng.integers(0, size - crop + 1), rng.integers(0, size - crop + 1)
            patch = src[other, cy:cy + crop, cx:cx + crop]
            np.maximum(canvas[py:py + crop, px:px + crop], patch, out=canvas[py:py + crop, px:px + crop])
        r, c = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        np.maximum(canvas[r:r + h, c:c + w], src[j], out=canvas[r:r + h, c:c + w])
        labels[i] = source.labels[j]
        positions[i] = (r, c)
    result = LabeledImageSet(out, labels, "mnist-cluttered")
    return (result, positions) if return_positions else result


def batches(n, batch_size, seed, epoch=0):
    """Shuffled index batches for one epoch; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _find(base, names):
    for name in names:
        for candidate in (base / name, base / (name + ".gz")):
            if candidate.exists():
                return candidate
    return None


def mnist_paths(directory, split):
    directory = Path(directory)
    img_name, lbl_name = MNIST_FILES[split]
    alt = img_name.replace("-idx3-ubyte", ".idx3-ubyte"), lbl_name.replace("-idx1-ubyte", ".idx1-ubyte")
    img = _find(directory, [img_name, alt[0]])
    lbl = _find(directory, [lbl_name, alt[1]])
    if img is None or lbl is None:
        raise MissingDataError(f"MNIST {split} files ({img_name}, {lbl_name}) not found in {directory}")
    return img, lbl


def load_split(dataset, split, data_dir):
    """Load ``train`` or ``test`` for ``mnist``, ``mnist-cluttered`` or ``cifar10``.

    MNIST training keeps the first 50,000 images of the training file.
    """
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    data_dir = Path(data_dir)
    if dataset in ("mnist", "mnist-cluttered"):
        sub = data_dir / dataset
        directory = sub if sub.is_dir() else data_dir
        if dataset == "mnist-cluttered" and not sub.is_dir():
            raise MissingDataError(f"no generated cluttered set in {sub}")
        ds = load_mnist_idx(*mnist_paths(directory, split), name=dataset)
        if split == "train":
            ds = ds.head(MNIST_TRAIN_COUNT)
        return ds
    if dataset == "cifar10":
        for directory in (data_dir / "cifar10", data_dir / "cifar-10-batches-bin", data_dir):
            paths = [directory / f for f in CIFAR_FILES[split]]
            if all(p.exists() for p in paths):
                return load_cifar10_binary(paths)
        raise MissingDataError(f"CIFAR-10 {split} batches not found under {data_dir}")
    raise ValueError(f"unknown dataset {dataset!r}")

"""MNIST IDX / CIFAR-10 binary readers, normalization and augmentation."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentPolicy:
    flip_prob: float = 0.5
    crop_pad: int = 4

    @property
    def enabled(self) -> bool:
        return self.flip_prob > 0 or self.crop_pad > 0


NO_AUGMENT = AugmentPolicy(0.0, 0)


@dataclass
class Dataset:
    """Normalized train/test arrays, NCHW float32 images and int64 labels."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    augmentation: AugmentPolicy = field(default_factory=AugmentPolicy)
    name: str = ""
    num_classes: int = 10

    @property
    def pad_value(self) -> np.ndarray:
        """Normalized value of a black (raw 0) pixel, per channel."""
        return (-self.mean / self.std).astype(np.float32)

    def subset(self, n_train: int | None = None, n_test: int | None = None) -> "Dataset":
        return Dataset(self.x_train[:n_train], self.y_train[:n_train], self.x_test[:n_test],
                       self.y_test[:n_test], self.mean, self.std, self.augmentation, self.name,
                       self.num_classes)


def _read(path: Path) -> bytes:
    path = Path(path)
    if not path.exists() and path.with_name(path.name + ".gz").exists():
        path = path.with_name(path.name + ".gz")
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def parse_idx_images(buf: bytes) -> np.ndarray:
    if len(buf) < 16:
        raise DatasetFormatError(f"IDX image header truncated at byte {len(buf)}")
    magic, n, rows, cols = struct.unpack(">IIII", buf[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DatasetFormatError(f"bad IDX image magic 0x{magic:08x}")
    need = 16 + n * rows * cols
    if len(buf) < need:
        raise DatasetFormatError(f"IDX image payload truncated at byte {len(buf)} (expected {need})")
    return np.frombuffer(buf, np.uint8, n * rows * cols, 16).reshape(n, rows, cols)


def parse_idx_labels(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise DatasetFormatError(f"IDX label header truncated at byte {len(buf)}")
    magic, n = struct.unpack(">II", buf[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DatasetFormatError(f"bad IDX label magic 0x{magic:08x}")
    if len(buf) < 8 + n:
        raise DatasetFormatError(f"IDX label payload truncated at byte {len(buf)} (expected {8 + n})")
    return np.frombuffer(buf, np.uint8, n, 8).astype(np.int64)


def parse_cifar_records(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Split a CIFAR-10 binary batch into (N, 3, 32, 32) uint8 images and labels."""
    if len(buf) % CIFAR_RECORD:
        raise DatasetFormatError(f"CIFAR-10 batch length {len(buf)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(buf, np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.flatnonzero(labels > 9)[0])
        raise DatasetFormatError(f"CIFAR-10 record {bad} has label {labels[bad]} > 9")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def normalize(train: np.ndarray, test: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Scale to [0, 1], then standardize per channel with train-split statistics."""
    tr = train.astype(np.float32) / 255.0
    te = test.astype(np.float32) / 255.0
    mean = tr.mean(axis=(0, 2, 3)).astype(np.float32)
    std = tr.std(axis=(0, 2, 3)).astype(np.float32)
    std = np.where(std > 0, std, 1).astype(np.float32)
    shape = (1, -1, 1, 1)
    return (tr - mean.reshape(shape)) / std.reshape(shape), (te - mean.reshape(shape)) / std.reshape(shape), mean, std


def _pair(images: np.ndarray, labels: np.ndarray, what: str) -> None:
    if len(images) != len(labels):
        raise DatasetFormatError(f"{what}: {len(images)} images but {len(labels)} labels")


def load_mnist_idx(path, augmentation: AugmentPolicy | None = None) -> Dataset:
    """Read the four MNIST IDX files (optionally gzipped) from directory ``path``.

    Digits are not mirror-symmetric, so the default policy only crops.
    """
    path = Path(path)
    xtr = parse_idx_images(_read(path / "train-images-idx3-ubyte"))
    ytr = parse_idx_labels(_read(path / "train-labels-idx1-ubyte"))
    xte = parse_idx_images(_read(path / "t10k-images-idx3-ubyte"))
    yte = parse_idx_labels(_read(path / "t10k-labels-idx1-ubyte"))
    _pair(xtr, ytr, "train split")
    _pair(xte, yte, "test split")
    xtr, xte, mean, std = normalize(xtr[:, None], xte[:, None])
    policy = AugmentPolicy(0.0, 2) if augmentation is None else augmentation
    return Dataset(xtr, ytr, xte, yte, mean, std, policy, "mnist")


def load_cifar10_binary(path, augmentation: AugmentPolicy | None = None) -> Dataset:
    """Read ``data_batch_{1..5}.bin`` and ``test_batch.bin`` from directory ``path``."""
    path = Path(path)
    train_files = sorted(path.glob("data_batch_*.bin"))
    if not train_files:
        raise FileNotFoundError(f"no data_batch_*.bin under {path}")
    parts = [parse_cifar_records(_read(f)) for f in train_files]
    xtr = np.concatenate([p[0] for p in parts])
    ytr = np.concatenate([p[1] for p in parts])
    xte, yte = parse_cifar_records(_read(path / "test_batch.bin"))
    xtr, xte, mean, std = normalize(xtr, xte)
    return Dataset(xtr, ytr, xte, yte, mean, std,
                   AugmentPolicy() if augmentation is None else augmentation, "cifar10")


def load_dataset(name: str, path, augmentation: AugmentPolicy | None = None) -> Dataset:
    if name == "mnist":
        return load_mnist_idx(path, augmentation)
    if name == "cifar10":
        return load_cifar10_binary(path, augmentation)
    raise ValueError(f"unknown dataset {name!r}")


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1]


def random_crop(image: np.ndarray, pad: int, offset: tuple[int, int], fill=0.0) -> np.ndarray:
    """Pad ``image`` (C, H, W) by ``pad`` on each side and crop back at ``offset``."""
    c, h, w = image.shape
    fill = np.broadcast_to(np.asarray(fill, image.dtype), (c,))
    padded = np.empty((c, h + 2 * pad, w + 2 * pad), image.dtype)
    padded[...] = fill[:, None, None]
    padded[:, pad:pad + h, pad:pad + w] = image
    i, j = offset
    return padded[:, i:i + h, j:j + w]


def augment(batch: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator,
            fill=0.0) -> np.ndarray:
    """Random horizontal flip then pad-and-crop, per image.

    Random numbers are always drawn for the whole batch, so the stream
    consumed per batch does not depend on the outcomes.
    """
    n = len(batch)
    flips = rng.random(n) < policy.flip_prob
    offsets = rng.integers(0, 2 * policy.crop_pad + 1, size=(n, 2))
    out = np.empty_like(batch)
    for b in range(n):
        img = hflip(batch[b]) if flips[b] else batch[b]
        if policy.crop_pad:
            img = random_crop(img, policy.crop_pad, tuple(offsets[b]), fill)
        out[b] = img
    return out

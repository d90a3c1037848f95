"""Dataset ingestion (IDX, CIFAR-10 binary, synthetic) and augmentation."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CIFAR_RECORD = 3073
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
MNIST_MEAN = (0.1307,)
MNIST_STD = (0.3081,)
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetFormatError(ValueError):
    """Malformed dataset file; the message names the byte offset."""


class DatasetMissingError(FileNotFoundError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64, normalized
    labels: np.ndarray  # (N,) int64
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


@dataclass
class DatasetSource:
    kind: str = "synthetic"  # idx-images | cifar-binary | synthetic
    path: str = ""
    split: str = "train"
    mean: tuple = field(default_factory=tuple)
    std: tuple = field(default_factory=tuple)


def normalize(images_u8: np.ndarray, mean, std) -> np.ndarray:
    x = images_u8.astype(np.float64) / 255.0
    m = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    return (x - m) / s


# ---------------------------------------------------------------------------
# IDX (MNIST-format)
# ---------------------------------------------------------------------------

def _read_idx(path, expected_magic: int) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DatasetMissingError(str(path))
    blob = path.read_bytes()
    if len(blob) < 4:
        raise DatasetFormatError(f"{path}: truncated header at offset {len(blob)}")
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic != expected_magic:
        raise DatasetFormatError(f"{path}: bad magic 0x{magic:08x} at offset 0 "
                                 f"(expected 0x{expected_magic:08x})")
    ndim = magic & 0xFF
    if len(blob) < 4 + 4 * ndim:
        raise DatasetFormatError(f"{path}: truncated dimensions at offset {len(blob)}")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    start = 4 + 4 * ndim
    count = int(np.prod(dims))
    if len(blob) - start < count:
        raise DatasetFormatError(f"{path}: truncated payload at offset {len(blob)}, "
                                 f"expected {start + count} bytes")
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=start).reshape(dims)


def load_idx(images_path, labels_path, mean=MNIST_MEAN, std=MNIST_STD,
             num_classes: int = 10) -> Dataset:
    imgs = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if imgs.shape[0] != labels.shape[0]:
        raise DatasetFormatError(f"{imgs.shape[0]} images vs {labels.shape[0]} labels")
    x = normalize(imgs[:, None, :, :], mean, std)
    return Dataset(x, labels.astype(np.int64), num_classes)


# ---------------------------------------------------------------------------
# CIFAR-10 binary
# ---------------------------------------------------------------------------

def load_cifar_binary(path, mean=CIFAR_MEAN, std=CIFAR_STD) -> Dataset:
    """Read one or more ``*.bin`` batch files (3073-byte records: label, then 3x32x32 pixels)."""
    paths = [Path(p) for p in (path if isinstance(path, (list, tuple)) else [path])]
    images, labels = [], []
    for p in paths:
        if not p.exists():
            raise DatasetMissingError(str(p))
        blob = p.read_bytes()
        if len(blob) % CIFAR_RECORD:
            whole = len(blob) // CIFAR_RECORD * CIFAR_RECORD
            raise DatasetFormatError(f"{p}: truncated record at offset {whole}")
        rec = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.nonzero(rec[:, 0] > 9)[0]
        if bad.size:
            raise DatasetFormatError(f"{p}: label {rec[bad[0], 0]} at offset {bad[0] * CIFAR_RECORD}")
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    return Dataset(normalize(np.concatenate(images), mean, std), np.concatenate(labels), 10)


def load_cifar_dir(root, split: str = "train") -> Dataset:
    root = Path(root)
    if split == "train":
        files = [root / f"data_batch_{i}.bin" for i in range(1, 6)]
    else:
        files = [root / "test_batch.bin"]
    return load_cifar_binary(files)


# ---------------------------------------------------------------------------
# synthetic
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    n: int = 256
    num_classes: int = 4
    channels: int = 3
    size: int = 8
    noise: float = 0.5


def synth_dataset(spec: SynthSpec, seed: int = 0, split: str = "train") -> Dataset:
    """Class-template images plus Gaussian noise.

    Templates depend only on ``seed`` so train and test splits share classes.
    """
    templates = np.random.default_rng([seed, 0]).normal(
        size=(spec.num_classes, spec.channels, spec.size, spec.size))
    rng = np.random.default_rng([seed, 1 if split == "train" else 2])
    labels = np.arange(spec.n) % spec.num_classes
    rng.shuffle(labels)
    gain = rng.uniform(0.5, 1.5, size=(spec.n, 1, 1, 1))
    x = templates[labels] * gain + spec.noise * rng.normal(size=(spec.n, spec.channels,
                                                                  spec.size, spec.size))
    return Dataset(x, labels.astype(np.int64), spec.num_classes)


def load_source(src: DatasetSource, synth: SynthSpec | None = None, seed: int = 0) -> Dataset:
    if src.kind == "synthetic":
        return synth_dataset(synth or SynthSpec(), seed, src.split)
    if src.kind == "cifar-binary":
        ds = load_cifar_dir(src.path, src.split)
        if src.mean:
            raise ValueError("custom normalization for CIFAR is not supported")
        return ds
    if src.kind == "idx-images":
        root = Path(src.path)
        prefix = "train" if src.split == "train" else "t10k"
        return load_idx(root / f"{prefix}-images-idx3-ubyte", root / f"{prefix}-labels-idx1-ubyte",
                        src.mean or MNIST_MEAN, src.std or MNIST_STD)
    raise ValueError(f"unknown dataset kind {src.kind!r}")


# ---------------------------------------------------------------------------
# augmentation and batching
# ---------------------------------------------------------------------------

def random_crop_flip(images: np.ndarray, rng: np.random.Generator, pad: int = 4,
                     crop: bool = True, flip: bool = True) -> np.ndarray:
    n, c, h, w = images.shape
    out = images
    if crop:
        padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        dy = rng.integers(0, 2 * pad + 1, size=n)
        dx = rng.integers(0, 2 * pad + 1, size=n)
        out = np.empty_like(images)
        for i in range(n):
            out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    if flip:
        mask = rng.random(n) < 0.5
        if mask.any():
            out = out.copy() if out is images else out
            out[mask] = out[mask, :, :, ::-1]
    return out


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]

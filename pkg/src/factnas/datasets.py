"""Datasets: a synthetic desk-scale image task plus binary-format loaders.

The synthetic task is oriented sinusoidal gratings under per-sample random
phase, frequency, amplitude, channel gain, and additive pixel noise; the
label is the orientation bucket.  Random phase makes raw-pixel linear
classifiers useless while small convnets solve the task quickly, which is
the intended difficulty for search experiments on one CPU core.

Loaders: single-channel IDX image/label pairs and the 3073-byte-record
CIFAR-10 binary batches.  Both validate sizes exactly and report the byte
offset where parsing failed.
"""

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .rng import substream

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 pixel bytes


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64
    labels: np.ndarray  # (N,) int64
    classes: int
    name: str = "dataset"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ConfigError("dataset images must be (N, C, H, W)")
        if self.labels.shape != (self.images.shape[0],):
            raise ConfigError("dataset labels must align with images")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx: np.ndarray, name: str = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.classes,
                       name or self.name)


@dataclass
class ChannelStats:
    mean: np.ndarray  # (C,)
    std: np.ndarray   # (C,)


def compute_stats(ds: Dataset) -> ChannelStats:
    mean = ds.images.mean(axis=(0, 2, 3))
    std = ds.images.std(axis=(0, 2, 3))
    return ChannelStats(mean=mean, std=np.maximum(std, 1e-8))


def apply_stats(ds: Dataset, stats: ChannelStats) -> Dataset:
    c = ds.images.shape[1]
    imgs = (ds.images - stats.mean.reshape(1, c, 1, 1)) / stats.std.reshape(1, c, 1, 1)
    return Dataset(imgs, ds.labels, ds.classes, ds.name)


def synth_generate(n: int, image_size: int = 16, classes: int = 4,
                   channels: int = 3, noise: float = 0.3, seed: int = 0,
                   name: str = "synth", stream: str = "synth") -> Dataset:
    """Oriented-grating classification task.

    Class k is the orientation pi*k/classes.  Per sample: frequency in
    [1.5, 3] cycles, phase in [0, 2pi), amplitude in [0.8, 1.2], independent
    channel gains in [0.7, 1.3], then iid Gaussian pixel noise.  Class
    counts are balanced (remainder spread over the lowest classes) and the
    sample order is shuffled.  `stream` names the rng substream, so disjoint
    train/test sets come from the same seed.
    """
    if n < classes:
        raise ConfigError("need at least one sample per class")
    if classes < 2:
        raise ConfigError("need at least two classes")
    rng = substream(seed, stream)
    per = n // classes
    counts = [per + (1 if k < n % classes else 0) for k in range(classes)]
    labels = np.repeat(np.arange(classes), counts)
    order = rng.permutation(n)
    labels = labels[order].astype(np.int64)

    yy, xx = np.meshgrid(np.arange(image_size), np.arange(image_size),
                         indexing="ij")
    xx = xx / image_size
    yy = yy / image_size
    theta = np.pi * labels / classes
    freq = rng.uniform(1.5, 3.0, size=n)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n)
    amp = rng.uniform(0.8, 1.2, size=n)
    gains = rng.uniform(0.7, 1.3, size=(n, channels))

    proj = (np.cos(theta)[:, None, None] * xx[None] +
            np.sin(theta)[:, None, None] * yy[None])
    grating = amp[:, None, None] * np.sin(
        2.0 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
    images = gains[:, :, None, None] * grating[:, None, :, :]
    images += noise * rng.standard_normal(images.shape)
    return Dataset(images, labels, classes, name)


# ---------------------------------------------------------------------------
# binary loaders
# ---------------------------------------------------------------------------


def _read_u32be(buf: bytes, offset: int) -> int:
    return int.from_bytes(buf[offset : offset + 4], "big")


def _load_idx_array(path: str, expect_magic: int) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if len(buf) < 4:
        raise FormatError(f"{path}: truncated at offset 0, no magic")
    magic = _read_u32be(buf, 0)
    if magic != expect_magic:
        raise FormatError(f"{path}: magic {magic}, expected {expect_magic}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError(f"{path}: truncated header at offset {len(buf)}")
    dims = [_read_u32be(buf, 4 + 4 * i) for i in range(ndim)]
    expected = header + int(np.prod(dims))
    if len(buf) != expected:
        raise FormatError(
            f"{path}: payload ends at offset {len(buf)}, expected {expected}")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path: str, labels_path: str, classes: int = None,
             name: str = "idx") -> Dataset:
    """Load an IDX image/label file pair (single-channel images)."""
    imgs = _load_idx_array(images_path, IDX_IMAGES_MAGIC)
    labels = _load_idx_array(labels_path, IDX_LABELS_MAGIC)
    if imgs.ndim != 3:
        raise FormatError(f"{images_path}: expected 3 dims, got {imgs.ndim}")
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: expected 1 dim, got {labels.ndim}")
    if imgs.shape[0] != labels.shape[0]:
        raise FormatError(
            f"image count {imgs.shape[0]} != label count {labels.shape[0]}")
    if classes is None:
        classes = int(labels.max()) + 1 if labels.size else 0
    if labels.size and int(labels.max()) >= classes:
        raise FormatError(f"label {int(labels.max())} outside {classes} classes")
    images = (imgs.astype(np.float64) / 255.0)[:, None, :, :]
    return Dataset(images, labels.astype(np.int64), classes, name)


def load_cifar_file(path: str) -> tuple:
    """One CIFAR-10 binary batch -> (images (N,3,32,32) in [0,1], labels)."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if not buf or len(buf) % CIFAR_RECORD:
        good = len(buf) - len(buf) % CIFAR_RECORD
        raise FormatError(
            f"{path}: size {len(buf)} is not a multiple of {CIFAR_RECORD}; "
            f"trailing bytes start at offset {good}")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if int(labels.max(initial=0)) > 9:
        raise FormatError(f"{path}: label byte exceeds 9")
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels

TRAIN_BATCH_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_BATCH_FILE = "test_batch.bin"


def load_cifar_binary(directory: str, split: str = "train") -> Dataset:
    """CIFAR-10 from the binary-batch layout: 5 train files or the test file."""
    if split == "train":
        files = TRAIN_BATCH_FILES
    elif split == "test":
        files = (TEST_BATCH_FILE,)
    else:
        raise ConfigError(f"unknown split {split!r}")
    parts = []
    for fname in files:
        path = os.path.join(directory, fname)
        if not os.path.exists(path):
            raise ConfigError(f"missing CIFAR batch file {path}")
        parts.append(load_cifar_file(path))
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, 10, f"cifar10-{split}")


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def cutout(image: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Zero a length x length square centered uniformly over the image.

    The square is clipped at the borders, so edge-centered cuts remove less.
    Returns a new array.
    """
    if image.ndim != 3:
        raise ConfigError("cutout expects a single (C, H, W) image")
    c, h, w = image.shape
    out = image.copy()
    cy = int(rng.integers(h))
    cx = int(rng.integers(w))
    y0, y1 = max(cy - length // 2, 0), min(cy + (length + 1) // 2, h)
    x0, x1 = max(cx - length // 2, 0), min(cx + (length + 1) // 2, w)
    out[:, y0:y1, x0:x1] = 0.0
    return out


def augment_batch(images: np.ndarray, rng: np.random.Generator,
                  pad_crop: int = 0, hflip: bool = False,
                  cutout_length: int = 0) -> np.ndarray:
    """Training-time augmentation: flip, pad-and-crop, then cutout.

    Draw order is fixed (flip mask, per-sample crop offsets, per-sample
    cutout centers) so a given rng state yields one exact result.
    """
    n, c, h, w = images.shape
    out = images.copy()
    if hflip:
        mask = rng.random(n) < 0.5
        out[mask] = out[mask][:, :, :, ::-1]
    if pad_crop:
        p = pad_crop
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
        offs = rng.integers(0, 2 * p + 1, size=(n, 2))
        for i in range(n):
            oy, ox = offs[i]
            out[i] = padded[i, :, oy : oy + h, ox : ox + w]
    if cutout_length:
        for i in range(n):
            out[i] = cutout(out[i], cutout_length, rng)
    return out

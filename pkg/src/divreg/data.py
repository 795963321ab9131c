"""Synthetic expression-like images plus an on-disk format and batching.

Class k's template is k Gaussian bumps at class-fixed random positions
(class 0 is blank); samples add Gaussian pixel noise and, with some
probability, a zeroed occlusion square, then clamp to [0,1]. Every 5th
sample per class goes to the test split (80/20 round-robin). Images are
quantized through float32 at generation so the in-memory dataset and the
32-bit file format hold identical values.

File format, magic "DVDS": header (magic, version, class count, sample
count, height, width; u32 little-endian), then labels as u32, then
images as float32, both little-endian. Round trips are bit exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_SIZE = 32
DATASET_MAGIC = b"DVDS"
DATASET_VERSION = 1
_HEADER_FMT = "<4sIIIII"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)
_TEMPLATE_SALT = 0x7E3D


class DatasetFormatError(ValueError):
    """Raised for malformed, truncated, or out-of-range dataset files."""


@dataclass(frozen=True)
class GeneratorConfig:
    class_count: int = 8
    samples_per_class: int = 100
    noise_sigma: float = 0.05
    occlusion_prob: float = 0.3
    occlusion_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")
        if self.samples_per_class < 1:
            raise ValueError(f"samples_per_class must be >= 1, got {self.samples_per_class}")
        if not self.noise_sigma >= 0:
            raise ValueError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError(f"occlusion_prob must be in [0, 1], got {self.occlusion_prob}")
        if not 0 <= self.occlusion_size < IMAGE_SIZE:
            raise ValueError(
                f"occlusion_size must be in [0, {IMAGE_SIZE}), got {self.occlusion_size}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    @classmethod
    def from_dict(cls, doc: dict) -> "GeneratorConfig":
        known = {"class_count", "samples_per_class", "noise_sigma",
                 "occlusion_prob", "occlusion_size", "seed"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown generator config field {sorted(unknown)[0]!r}")
        return cls(**doc)


class Dataset:
    """Image/label arrays with validated invariants."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, class_count: int):
        images = np.asarray(images, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4 or images.shape[1] != 1:
            raise ValueError(f"images must have shape (n,1,H,W), got {images.shape}")
        if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
            raise ValueError(
                f"labels shape {labels.shape} does not match {images.shape[0]} images")
        if images.size and not np.isfinite(images).all():
            raise ValueError("images contain non-finite values")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")
        if class_count < 1:
            raise ValueError(f"class_count must be >= 1, got {class_count}")
        if labels.size and (labels.min() < 0 or labels.max() >= class_count):
            raise ValueError(f"labels must lie in [0, {class_count})")
        self.images = images
        self.labels = labels
        self.class_count = class_count

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]


def class_template(class_index: int, size: int = IMAGE_SIZE) -> np.ndarray:
    """Deterministic (1,size,size) template: class_index Gaussian bumps at
    positions fixed by (salt, class); class 0 is blank."""
    rng = np.random.default_rng(np.random.SeedSequence([_TEMPLATE_SALT, class_index]))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    for _ in range(class_index):
        cy = rng.uniform(4, size - 4)
        cx = rng.uniform(4, size - 4)
        img += 0.9 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 2.5 ** 2))
    return np.clip(img, 0.0, 1.0)[None, :, :]


def generate(config: GeneratorConfig) -> tuple[Dataset, Dataset]:
    """Deterministic (train, test) split; every 5th sample per class is
    held out for test."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed]))
    size = IMAGE_SIZE
    train_images, train_labels, test_images, test_labels = [], [], [], []
    for k in range(config.class_count):
        template = class_template(k, size)
        for i in range(config.samples_per_class):
            img = template + rng.normal(0.0, config.noise_sigma, (1, size, size)) \
                if config.noise_sigma > 0 else template.copy()
            occlude = rng.random() < config.occlusion_prob
            s = config.occlusion_size
            y0 = int(rng.integers(0, size - s + 1)) if s else 0
            x0 = int(rng.integers(0, size - s + 1)) if s else 0
            if occlude and s:
                img = img.copy()
                img[:, y0:y0 + s, x0:x0 + s] = 0.0
            img = np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64)
            if i % 5 == 4:
                test_images.append(img)
                test_labels.append(k)
            else:
                train_images.append(img)
                train_labels.append(k)
    k = config.class_count

    def pack(imgs, labs):
        if imgs:
            return Dataset(np.stack(imgs), np.asarray(labs, dtype=np.int64), k)
        return Dataset(np.zeros((0, 1, size, size)), np.zeros(0, dtype=np.int64), k)

    return pack(train_images, train_labels), pack(test_images, test_labels)


def nearest_template(images: np.ndarray, class_count: int) -> np.ndarray:
    """Baseline classifier: nearest class template by squared distance."""
    templates = np.stack([class_template(k) for k in range(class_count)])
    flat = images.reshape(images.shape[0], -1)
    tflat = templates.reshape(class_count, -1)
    d2 = ((flat[:, None, :] - tflat[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def save_dataset(dataset: Dataset, path) -> None:
    n = len(dataset)
    _, h, w = dataset.image_shape
    chunks = [struct.pack(_HEADER_FMT, DATASET_MAGIC, DATASET_VERSION,
                          dataset.class_count, n, h, w)]
    chunks.append(dataset.labels.astype("<u4").tobytes())
    chunks.append(dataset.images.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER_SIZE:
        raise DatasetFormatError(
            f"truncated dataset: {len(buf)} bytes is shorter than the header")
    magic, version, class_count, n, h, w = struct.unpack_from(_HEADER_FMT, buf, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    if class_count < 1 or h < 1 or w < 1 or h > 4096 or w > 4096:
        raise DatasetFormatError(
            f"implausible header: class_count={class_count}, size={h}x{w}")
    expected = _HEADER_SIZE + 4 * n + 4 * n * h * w
    if len(buf) < expected:
        raise DatasetFormatError(
            f"truncated dataset: {len(buf)} bytes, header promises {expected}")
    if len(buf) > expected:
        raise DatasetFormatError(f"{len(buf) - expected} trailing bytes after image data")
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=_HEADER_SIZE).astype(np.int64)
    if labels.size and labels.max() >= class_count:
        raise DatasetFormatError(
            f"label {int(labels.max())} out of range for {class_count} classes")
    images = np.frombuffer(buf, dtype="<f4", count=n * h * w,
                           offset=_HEADER_SIZE + 4 * n)
    images = images.astype(np.float64).reshape(n, 1, h, w)
    return Dataset(images, labels, class_count)


def batches(dataset: Dataset, batch_size: int, shuffle_seed=None):
    """Partition a (seeded) permutation of the dataset into batches; the
    final batch may be short. shuffle_seed None keeps dataset order."""
    n = len(dataset)
    if n == 0:
        return
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size must be in [1, {n}], got {batch_size}")
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]

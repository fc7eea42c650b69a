"""Dataset ingestion and batch construction.

Covers the CIFAR binary format (1 label byte + 3072 pixel bytes per record;
CIFAR-100 carries a coarse label byte that we skip), a deterministic
synthetic dataset for desk-scale experiments, pad-crop/flip augmentation,
and mixup batches.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError


@dataclass
class Dataset:
    images: np.ndarray        # (N, H, W, 3) float32
    labels: np.ndarray        # (N,) int64
    class_count: int
    split: str = "train"

    def __len__(self):
        return self.images.shape[0]


@dataclass
class MixupConfig:
    enabled: bool = False
    alpha: float = 1.0        # Beta(alpha, alpha) parameter
    tail_epochs: int = 20     # plain-training epochs appended after mixup

    def __post_init__(self):
        if self.enabled and self.alpha <= 0:
            raise ConfigError(f"mixup alpha must be positive, got {self.alpha}")


# ---------------------------------------------------------------------------
# CIFAR binary format
# ---------------------------------------------------------------------------

def _decode_records(buf, record_size, label_offset, path):
    n_bytes = len(buf)
    if n_bytes == 0:
        raise DataFormatError(f"{path}: empty file", byte_offset=0)
    if n_bytes % record_size != 0:
        raise DataFormatError(
            f"{path}: file ends mid-record ({n_bytes % record_size} stray bytes; "
            f"record size is {record_size})",
            byte_offset=n_bytes,
        )
    n = n_bytes // record_size
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(n, record_size)
    labels = raw[:, label_offset].astype(np.int64)
    planes = raw[:, label_offset + 1:].reshape(n, 3, 32, 32)
    images = planes.transpose(0, 2, 3, 1).astype(np.float32)
    return images, labels


def load_cifar_binary(paths, classes=10, normalization="meanstd", stats=None,
                      split="train"):
    """Decode one or more CIFAR binary batch files into a Dataset.

    classes selects the record layout: 10 -> 3073-byte records with one
    label byte; 100 -> 3074-byte records (coarse byte skipped, fine label
    used). normalization is "meanstd" (per-channel statistics, computed
    from this data unless ``stats`` is given) or "scale255".

    Returns (dataset, stats) so test splits can reuse training statistics.
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    if classes == 10:
        record_size, label_offset = 3073, 0
    elif classes == 100:
        record_size, label_offset = 3074, 1
    else:
        raise ConfigError(f"classes must be 10 or 100, got {classes}")

    parts = []
    for path in paths:
        with open(path, "rb") as f:
            buf = f.read()
        parts.append(_decode_records(buf, record_size, label_offset, str(path)))
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    if labels.max(initial=0) >= classes:
        raise DataFormatError(
            f"label {int(labels.max())} out of range for {classes} classes")

    if normalization == "meanstd":
        if stats is None:
            stats = channel_stats(images)
        mean, std = stats
        images = (images - mean) / std
    elif normalization == "scale255":
        images = images / np.float32(255.0)
        stats = None
    else:
        raise ConfigError(f"unknown normalization {normalization!r}")
    return Dataset(images.astype(np.float32), labels, classes, split), stats


def channel_stats(images):
    mean = images.mean(axis=(0, 1, 2), dtype=np.float64).astype(np.float32)
    std = images.std(axis=(0, 1, 2), dtype=np.float64).astype(np.float32)
    return mean, std


# ---------------------------------------------------------------------------
# augmentation and mixup
# ---------------------------------------------------------------------------

def augment_batch(batch, rng, pad=4, flip_prob=0.5):
    """Random pad-and-crop plus horizontal flip, per sample.

    Shapes and labels are untouched; draws come only from ``rng`` so a
    fixed seed reproduces batches exactly.
    """
    n, h, w, c = batch.shape
    padded = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=batch.dtype)
    padded[:, pad: pad + h, pad: pad + w, :] = batch
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < flip_prob
    out = np.empty_like(batch)
    for i in range(n):
        crop = padded[i, dy[i]: dy[i] + h, dx[i]: dx[i] + w, :]
        out[i] = crop[:, ::-1, :] if flip[i] else crop
    return out


def mixup_batch(batch, labels, alpha, rng):
    """Convex-combine the batch with a shuffled copy of itself.

    Returns (mixed batch, labels, permuted labels, lam); the caller forms
    the loss as lam * CE(labels) + (1 - lam) * CE(permuted labels).
    """
    lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(batch.shape[0])
    mixed = batch.dtype.type(lam) * batch + batch.dtype.type(1 - lam) * batch[perm]
    return mixed, labels, labels[perm], lam


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

# distinct mean colors per class keep the task linearly separable
_PALETTE = np.array([
    [0.9, 0.2, 0.2], [0.2, 0.9, 0.2], [0.2, 0.2, 0.9], [0.9, 0.9, 0.2],
    [0.9, 0.2, 0.9], [0.2, 0.9, 0.9], [0.7, 0.5, 0.1], [0.1, 0.5, 0.7],
    [0.5, 0.1, 0.7], [0.4, 0.4, 0.4],
], dtype=np.float32)


def synth_dataset(class_count=2, n_per_class=100, image_size=16, seed=0,
                  split="train"):
    """Separable toy images: each class is a color-tinted Gaussian blob at a
    class-specific position over a class-frequency sinusoid, plus noise.
    Deterministic per seed."""
    if class_count < 2 or class_count > len(_PALETTE):
        raise ConfigError(f"class_count must be in [2, {len(_PALETTE)}], got {class_count}")
    rng = np.random.default_rng(seed)
    n = class_count * n_per_class
    images = np.empty((n, image_size, image_size, 3), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float32) / image_size
    idx = 0
    for k in range(class_count):
        cy = 0.25 + 0.5 * ((k * 0.37) % 1.0)
        cx = 0.25 + 0.5 * ((k * 0.61) % 1.0)
        blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / 0.02))
        wave = 0.25 * np.sin(2 * np.pi * (k + 1) * xx)
        base = blob[..., None] * _PALETTE[k] + wave[..., None]
        for _ in range(n_per_class):
            noise = rng.normal(0.0, 0.08, size=(image_size, image_size, 3))
            images[idx] = base + 0.3 * _PALETTE[k] + noise.astype(np.float32)
            labels[idx] = k
            idx += 1
    order = rng.permutation(n)
    return Dataset(images[order], labels[order], class_count, split)


def load_synth_manifest(path):
    """Manifest: JSON with class_count, n_per_class, seed and optionally
    image_size and out (output path for the rendered dataset)."""
    with open(path) as f:
        raw = json.load(f)
    known = {"class_count", "n_per_class", "seed", "image_size", "out"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown manifest keys: {', '.join(unknown)}")
    for key in ("class_count", "n_per_class", "seed"):
        if key not in raw:
            raise ConfigError(f"manifest missing required key {key!r}")
    return raw


def save_dataset_npz(dataset, path):
    np.savez(path, images=dataset.images, labels=dataset.labels,
             class_count=np.int64(dataset.class_count),
             split=np.str_(dataset.split))


def load_dataset_npz(path):
    with np.load(path, allow_pickle=False) as z:
        return Dataset(z["images"], z["labels"], int(z["class_count"]),
                       str(z["split"]))


def iterate_minibatches(images, labels, batch_size, rng=None, shuffle=True):
    """Yield (x, y) slices; order is a pure function of the rng state."""
    n = images.shape[0]
    if shuffle:
        if rng is None:
            raise ConfigError("shuffling requires an rng")
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        sel = order[start: start + batch_size]
        yield images[sel], labels[sel]

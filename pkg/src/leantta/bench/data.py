"""Synthetic source datasets for the reference models."""

import numpy as np

from leantta.shift import LabeledDataset


def gaussian_clusters(n, num_classes=3, dim=8, separation=2.0, spread=1.0, seed=0):
    """Isotropic Gaussian blobs with class means drawn on a sphere of radius ``separation``.

    Classes are balanced (round-robin labels) and the row order is shuffled.
    """
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(num_classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    labels = rng.permutation(np.arange(n) % num_classes)
    x = means[labels] + spread * rng.normal(size=(n, dim))
    return LabeledDataset(x.astype(np.float32), labels, num_classes)


def two_blobs(n, dim=2, gap=6.0, seed=0):
    """Two well-separated blobs at ``-gap/2`` and ``+gap/2`` along the first axis."""
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 2)
    x = rng.normal(size=(n, dim))
    x[:, 0] += np.where(labels == 1, gap / 2, -gap / 2)
    return LabeledDataset(x.astype(np.float32), labels, 2)


def _pattern(kind, size, phase):
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == 0:
        return 0.5 + 0.5 * np.sin(2 * np.pi * (yy / 4.0) + phase)
    if kind == 1:
        return 0.5 + 0.5 * np.sin(2 * np.pi * (xx / 4.0) + phase)
    r = np.hypot(yy - (size - 1) / 2, xx - (size - 1) / 2)
    return 0.5 + 0.5 * np.cos(2 * np.pi * r / 5.0 + phase)


def pattern_images(n, num_classes=3, channels=1, size=8, noise=0.15, seed=0):
    """Small textured images in [0, 1]: horizontal, vertical or radial waves.

    Each image gets a random phase, contrast, offset and pixel noise.
    """
    if not 1 <= num_classes <= 3:
        raise ValueError("pattern_images supports 1 to 3 classes")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    x = np.empty((n, channels, size, size))
    for i, c in enumerate(labels):
        base = _pattern(c, size, rng.uniform(0, 2 * np.pi))
        amp = rng.uniform(0.5, 1.0)
        offset = rng.uniform(-0.15, 0.15)
        for ch in range(channels):
            img = 0.5 + amp * (base - 0.5) + offset + noise * rng.normal(size=(size, size))
            x[i, ch] = img
    return LabeledDataset(np.clip(x, 0, 1).astype(np.float32), labels, num_classes)


def split(ds, holdout_fraction=0.2, seed=0):
    """Shuffle and split into ``(train, holdout)``."""
    idx = np.random.default_rng(seed).permutation(len(ds))
    cut = len(ds) - int(round(holdout_fraction * len(ds)))
    return ds.subset(np.sort(idx[:cut])), ds.subset(np.sort(idx[cut:]))

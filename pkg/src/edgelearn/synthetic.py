"""Seeded synthetic datasets used by the scenarios and the test-suite."""
from __future__ import annotations

import numpy as np

from edgelearn.models import LabeledDataset
from edgelearn.replay import StreamConfig
from edgelearn.rng import substream


def regression_data(n: int, dim: int = 2, noise: float = 0.3, nonlinearity: float = 0.5, seed: int = 0) -> LabeledDataset:
    """Mostly-affine target with a sinusoidal bend along the first feature.

    ``y = x . w + 0.5 + nonlinearity * sin(2 x_0) + noise * eps`` with
    ``w = (1, -0.5, 1, -0.5, ...)`` and ``x ~ U[-2, 2]^dim``.
    """
    rng = substream(seed, "data")
    X = rng.uniform(-2.0, 2.0, size=(n, dim))
    w = np.where(np.arange(dim) % 2 == 0, 1.0, -0.5)
    y = X @ w + 0.5 + nonlinearity * np.sin(2.0 * X[:, 0]) + noise * rng.standard_normal(n)
    return LabeledDataset(X, y, "regression")


def blobs(n: int, dim: int, n_classes: int, spread: float = 2.0, seed: int = 0) -> LabeledDataset:
    """Gaussian class blobs with random centres; labels are balanced round-robin."""
    rng = substream(seed, "blobs")
    centres = spread * rng.standard_normal((n_classes, dim))
    y = np.arange(n) % n_classes
    X = centres[y] + rng.standard_normal((n, dim))
    return LabeledDataset(X, y, "classification", n_classes)


def circle_means(n_classes: int, dim: int = 2, radius: float = 3.0) -> np.ndarray:
    """Class centres evenly spaced on a circle in the first two coordinates."""
    if dim < 2:
        raise ValueError("circle layout needs dim >= 2")
    means = np.zeros((n_classes, dim))
    ang = 2.0 * np.pi * np.arange(n_classes) / n_classes
    means[:, 0] = radius * np.cos(ang)
    means[:, 1] = radius * np.sin(ang)
    return means


def train_test_split(data: LabeledDataset, test_fraction: float, seed: int = 0):
    n = len(data)
    n_test = int(round(test_fraction * n))
    perm = substream(seed, "split").permutation(n)
    return data.subset(np.sort(perm[n_test:])), data.subset(np.sort(perm[:n_test]))


def two_phase_stream(
    n_classes: int = 4,
    phase_a: int = 100,
    phase_b: int = 300,
    batch_size: int = 10,
    radius: float = 3.0,
    seed: int = 0,
) -> StreamConfig:
    """First half of the classes, then the second half."""
    half = n_classes // 2
    a = np.zeros(n_classes)
    a[:half] = 1.0 / half
    b = np.zeros(n_classes)
    b[half:] = 1.0 / (n_classes - half)
    return StreamConfig(n_classes, ((phase_a, tuple(a)), (phase_b, tuple(b))), batch_size,
                        circle_means(n_classes, 2, radius), seed=seed)

"""Synthetic desk-scale datasets for the defense experiments."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

IMAGE_SHAPE = (1, 28, 28)


@dataclass
class Split:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray


def random_label_split(seed: int = 0, n: int = 200, dim: int = 20, classes: int = 10) -> Split:
    """Gaussian inputs with random labels: a model can only memorize them.

    A network trained to zero loss on the first half is very confident on
    members and near chance on non-members, the regime in which the entropy
    attack works best.
    """
    rng = np.random.default_rng(seed)
    return Split(rng.normal(size=(n, dim)), rng.integers(0, classes, n),
                 rng.normal(size=(n, dim)), rng.integers(0, classes, n))


# -- image proxies for the reverse-engineering detector ----------------------------

def _grid(shape=IMAGE_SHAPE):
    _, h, w = shape
    return np.mgrid[0:h, 0:w].astype(np.float64)


def benign_images(rng: np.random.Generator, n: int, shape=IMAGE_SHAPE) -> np.ndarray:
    """Smooth digit-like images: a few thick strokes and soft blobs on a dark background."""
    yy, xx = _grid(shape)
    h, w = shape[1:]
    out = np.zeros((n, *shape))
    for i in range(n):
        img = np.zeros((h, w))
        for _ in range(rng.integers(1, 4)):
            y0, x0 = rng.uniform(5, h - 5), rng.uniform(5, w - 5)
            angle = rng.uniform(0, np.pi)
            length, width = rng.uniform(6, 14), rng.uniform(1.2, 2.5)
            dy, dx = yy - y0, xx - x0
            along = dx * np.cos(angle) + dy * np.sin(angle)
            across = -dx * np.sin(angle) + dy * np.cos(angle)
            stroke = np.exp(-(across / width) ** 2) * (np.abs(along) < length / 2)
            img = np.maximum(img, stroke)
        for _ in range(rng.integers(0, 2)):
            y0, x0, r = rng.uniform(6, h - 6), rng.uniform(6, w - 6), rng.uniform(2, 5)
            img = np.maximum(img, np.exp(-((yy - y0) ** 2 + (xx - x0) ** 2) / (2 * r * r)))
        out[i, 0] = img * rng.uniform(0.7, 1.0)
    return out.astype(np.float32)


def crafted_images(rng: np.random.Generator, n: int, shape=IMAGE_SHAPE) -> np.ndarray:
    """Stand-in for model-probing inputs: uniform noise and high-frequency patterns."""
    yy, xx = _grid(shape)
    out = np.zeros((n, *shape))
    for i in range(n):
        kind = rng.integers(0, 3)
        if kind == 0:
            img = rng.uniform(0, 1, shape[1:])
        elif kind == 1:
            period = rng.integers(1, 3)
            img = (((yy // period) + (xx // period)) % 2).astype(np.float64)
            img = np.clip(img * rng.uniform(0.5, 1.0) + rng.normal(0, 0.1, img.shape), 0, 1)
        else:
            f = rng.uniform(0.8, 1.5)
            img = 0.5 + 0.5 * np.sin(f * (yy * rng.uniform(-1, 1) + xx * rng.uniform(-1, 1)) * np.pi)
        out[i, 0] = img
    return out.astype(np.float32)


Generator = Callable[[np.random.Generator, int], np.ndarray]

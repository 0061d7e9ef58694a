"""Seeded synthetic scenes: a feature map, its label map and the class count."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError

SIZE = 64


@dataclass
class Scene:
    name: str
    features: np.ndarray  # (C, H, W)
    labels: np.ndarray  # (H, W) int
    num_classes: int


def boundary_scene(seed: int = 0, size: int = SIZE) -> Scene:
    """Two classes split by a vertical boundary that follows one gentle sinusoid wave."""
    rng = np.random.default_rng(seed)
    amp = size / 16 * (1 + 0.2 * rng.random())
    period = size * (1 + 0.2 * rng.random())
    phase = 2 * np.pi * rng.random()
    i = np.arange(size)[:, None]
    j = np.arange(size)[None, :]
    edge = size / 2 + amp * np.sin(2 * np.pi * i / period + phase)
    labels = (j >= edge).astype(np.int64)
    return Scene("boundary", labels[None].astype(np.float64), labels, 2)


def texture_scene(seed: int = 0, size: int = SIZE, frequency: float = 0.3) -> Scene:
    """Flat left part, checkerboard of fundamental ``frequency`` in the rightmost sixth.

    The textured strip is narrow so that the attention transition around
    it (where modulation magnifies) covers most of the texture.
    """
    i = np.arange(size)[:, None]
    j = np.arange(size)[None, :]
    start = size - size // 6
    labels = np.broadcast_to((j >= start).astype(np.int64), (size, size)).copy()
    checker = (np.floor(2 * frequency * i) + np.floor(2 * frequency * j)) % 2
    feat = np.where(labels == 1, checker, 0.5)
    return Scene("texture", feat[None].astype(np.float64), labels, 2)


def shapes_scene(seed: int = 0, size: int = SIZE, count: int = 4) -> Scene:
    """Random axis-aligned rectangles, each painted with its own class."""
    rng = np.random.default_rng(seed)
    labels = np.zeros((size, size), dtype=np.int64)
    for k in range(1, count + 1):
        h, w = rng.integers(size // 6, size // 2, size=2)
        r, c = rng.integers(0, size - h), rng.integers(0, size - w)
        labels[r : r + h, c : c + w] = k
    feat = labels / count
    return Scene("shapes", feat[None].astype(np.float64), labels, count + 1)


SCENES = {"boundary": boundary_scene, "texture": texture_scene, "shapes": shapes_scene}


def make_scene(name: str, seed: int = 0, size: int = SIZE) -> Scene:
    try:
        return SCENES[name](seed=seed, size=size)
    except KeyError:
        raise ConfigError(f"unknown scene {name!r}; choose from {sorted(SCENES)}") from None


def boundary_band(labels, width: int = 1) -> np.ndarray:
    """Pixels within ``width`` (Chebyshev) of a label change."""
    lab = np.asarray(labels)
    size = 2 * width + 1
    return ndimage.maximum_filter(lab, size=size, mode="nearest") != ndimage.minimum_filter(lab, size=size, mode="nearest")

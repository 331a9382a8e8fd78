"""Synthetic IDX datasets for fast end-to-end runs.

Each class owns a random binary template; an image is its class template
scaled to ``contrast`` plus Gaussian pixel noise.  ``noise`` large relative
to ``contrast`` makes the classes overlap, which keeps the training loss
away from zero (useful when comparing loss curves).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .pmdata import write_idx


@dataclass(frozen=True)
class ToySpec:
    side: int = 8
    classes: int = 10
    train_rows: int = 2000
    test_rows: int = 500
    contrast: float = 160.0
    noise: float = 30.0
    label_noise: float = 0.0
    seed: int = 0


SEPARABLE = ToySpec()
OVERLAPPING = ToySpec(contrast=90.0, noise=70.0, label_noise=0.1)


def make_toy(spec: ToySpec):
    """Return ``(train_x, train_y, test_x, test_y)``; images are uint8
    ``(n, side, side)``, labels uint8 and balanced."""
    rng = np.random.default_rng(spec.seed)
    templates = rng.random((spec.classes, spec.side, spec.side)) < 0.5

    def draw(n):
        y = np.arange(n) % spec.classes
        rng.shuffle(y)
        x = templates[y] * spec.contrast + 40 + rng.normal(0, spec.noise, (n, spec.side, spec.side))
        flip = rng.random(n) < spec.label_noise
        y = np.where(flip, rng.integers(0, spec.classes, n), y)
        return np.clip(np.rint(x), 0, 255).astype(np.uint8), y.astype(np.uint8)

    tx, ty = draw(spec.train_rows)
    vx, vy = draw(spec.test_rows)
    return tx, ty, vx, vy


def write_toy(outdir, spec: ToySpec = SEPARABLE) -> dict:
    """Write the four IDX files; returns their paths by role."""
    os.makedirs(outdir, exist_ok=True)
    arrays = dict(zip(("train_images", "train_labels", "test_images", "test_labels"), make_toy(spec)))
    paths = {}
    for role, arr in arrays.items():
        paths[role] = os.path.join(outdir, f"{role.replace('_', '-')}.idx")
        write_idx(paths[role], arr)
    return paths

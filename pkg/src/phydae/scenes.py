"""Procedural clean scenes resembling overhead imagery.

Used to bootstrap desk-scale corpora when no clean imagery is at hand: a
smooth terrain colour field, rectangular parcels, a few straight roads and
fine texture.
"""
from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .image_core import ImageTensor, save_image

_PALETTE = np.array([
    [0.32, 0.45, 0.22],  # vegetation
    [0.55, 0.50, 0.38],  # bare soil
    [0.62, 0.60, 0.58],  # built-up
    [0.20, 0.30, 0.42],  # water
    [0.45, 0.55, 0.30],  # crops
])


def make_scene(size: int, rng: np.random.Generator) -> ImageTensor:
    h = w = size
    coarse = rng.uniform(0.0, 1.0, size=(5, 5, 3))
    terrain = cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC)
    img = 0.25 + 0.35 * terrain

    for _ in range(rng.integers(3, 8)):
        y0, x0 = rng.integers(0, h - 4), rng.integers(0, w - 4)
        ph, pw = rng.integers(4, max(5, h // 3)), rng.integers(4, max(5, w // 3))
        colour = _PALETTE[rng.integers(len(_PALETTE))] + rng.normal(0.0, 0.04, size=3)
        img[y0:y0 + ph, x0:x0 + pw] = 0.3 * img[y0:y0 + ph, x0:x0 + pw] + 0.7 * colour

    canvas = np.zeros((h, w), np.uint8)
    for _ in range(rng.integers(1, 4)):
        p0 = tuple(int(v) for v in rng.integers(0, size, 2))
        p1 = tuple(int(v) for v in rng.integers(0, size, 2))
        cv2.line(canvas, p0, p1, 255, int(rng.integers(1, 3)))
    road = canvas.astype(np.float64)[:, :, None] / 255.0
    img = img * (1.0 - road) + 0.78 * road

    img += rng.normal(0.0, 0.025, size=img.shape)
    return ImageTensor(np.clip(img, 0.08, 0.92))


def write_scenes(out_dir, count: int, size: int = 64, seed: int = 0, bit_depth: int = 16) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        p = out_dir / f"scene_{i:04d}.png"
        save_image(make_scene(size, rng), p, bit_depth=bit_depth)
        paths.append(p)
    return paths

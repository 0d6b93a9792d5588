"""Procedural road scenes with exact ground truth, for tests and demos.

A scene has a sky band above a horizon, textured grass below it and a
gray asphalt road that widens toward the bottom edge.  Road borders wobble
and carry pixel-level jitter so that superpixels cannot follow them exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import imaging

ROAD_RGB = (104.0, 104.0, 110.0)
GRASS_RGB = (62.0, 128.0, 48.0)
SKY_RGB = (150.0, 190.0, 235.0)


def road_edges(height: int, width: int, rng: np.random.Generator, jitter: float = 2.0,
               horizon: float | None = None, road_width: float = 1.0):
    """Left and right road border columns per row, and the horizon row.

    ``horizon`` fixes the horizon as a fraction of the height (random in
    [0.35, 0.5) otherwise); ``road_width`` scales the road's half-width.
    """
    frac = rng.uniform(0.35, 0.5)
    horizon = int(height * (frac if horizon is None else horizon))
    y = np.arange(height, dtype=np.float64)
    t = np.clip((y - horizon) / max(height - 1 - horizon, 1), 0.0, 1.0)
    center = width * (0.5 + rng.uniform(-0.08, 0.08)) + width * rng.uniform(-0.15, 0.15) * t**2
    half = road_width * width * (0.03 + rng.uniform(0.28, 0.4) * t)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    freq = rng.uniform(2.0, 5.0, size=2) * 2 * np.pi / height
    amp = width * 0.015 * t
    left = center - half + amp * np.sin(freq[0] * y + phase[0]) + rng.normal(0, jitter, height) * t
    right = center + half + amp * np.sin(freq[1] * y + phase[1]) + rng.normal(0, jitter, height) * t
    return left, right, horizon


def _texture(rng, shape, base, noise, blotch):
    h, w = shape
    img = np.empty((h, w, 3))
    img[:] = base
    img += rng.normal(0.0, noise, size=(h, w, 1))  # luminance grain
    img += rng.normal(0.0, noise / 3.0, size=(h, w, 3))
    # coarse blotches, upsampled by repetition
    cells = rng.normal(0.0, blotch, size=(h // 8 + 1, w // 8 + 1, 1))
    img += np.repeat(np.repeat(cells, 8, axis=0), 8, axis=1)[:h, :w]
    return img


def road_scene(height: int = 88, width: int = 288, seed: int = 0, noise: float = 4.0,
               horizon: float | None = None, road_width: float = 1.0):
    """One RGB scene and its ground truth (road / non-road, all valid)."""
    rng = np.random.default_rng(seed)
    left, right, horizon = road_edges(height, width, rng, horizon=horizon, road_width=road_width)
    yy, xx = np.mgrid[0:height, 0:width]
    road = (yy > horizon) & (xx >= left[:, None]) & (xx <= right[:, None])

    grass = _texture(rng, (height, width), np.array(GRASS_RGB) * rng.uniform(0.9, 1.1), noise * 1.5, 3.0)
    asphalt = _texture(rng, (height, width), np.array(ROAD_RGB) * rng.uniform(0.9, 1.1), noise, 2.0)
    sky = np.empty((height, width, 3))
    sky[:] = SKY_RGB
    sky += (yy[..., None] / height) * 25.0 + rng.normal(0.0, 1.5, size=(height, width, 1))
    img = np.where((yy <= horizon)[..., None], sky, grass)
    img = np.where(road[..., None], asphalt, img)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    labels = np.where(road, imaging.ROAD, imaging.NON_ROAD).astype(np.uint8)
    return image, imaging.LabelMap.from_labels(labels)


def scenes(n: int, height: int = 88, width: int = 288, seed: int = 0):
    """``n`` independent scenes; scene i uses seed ``seed * 1000 + i``."""
    return [road_scene(height, width, seed * 1000 + i) for i in range(n)]


def write_dataset(root, n: int, height: int = 88, width: int = 288, seed: int = 0, with_gt: bool = True) -> list[Path]:
    """Write a KITTI-like tree: ``image_2/<cat>_<k>.png`` and native masks in ``gt_image_2/``.

    Categories cycle through UM, UMM, UU.  Returns the image paths.
    """
    root = Path(root)
    (root / "image_2").mkdir(parents=True, exist_ok=True)
    if with_gt:
        (root / "gt_image_2").mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (image, gt) in enumerate(scenes(n, height, width, seed)):
        stem = f"{imaging.CATEGORIES[i % 3].lower()}_{i:06d}"
        path = root / "image_2" / f"{stem}.png"
        imaging.save_image(image, path)
        if with_gt:
            imaging.save_mask(gt, root / "gt_image_2" / f"{stem}.png")
        paths.append(path)
    return paths

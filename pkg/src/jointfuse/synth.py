"""Synthetic registered IR/visible scenes with boxes and masks.

Class 1 objects are warm in infrared and dim in visible light; class 2
objects are lukewarm in infrared and bright, textured in visible light.
"""
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import Box, save_image, write_annotations


def make_scene(rng, size=32):
    H = W = size
    yy, xx = np.mgrid[0:H, 0:W] / size
    # visible: lit gradient + texture; infrared: cool, smooth background
    phase = rng.uniform(0, 2 * np.pi, 2)
    texture = 0.08 * np.sin(2 * np.pi * (3 * xx + 2 * yy) + phase[0]) * np.sin(2 * np.pi * 4 * yy + phase[1])
    vis = np.clip(0.35 + 0.25 * xx + texture + 0.02 * rng.standard_normal((H, W)), 0, 1)
    ir = np.clip(0.15 + 0.1 * yy + 0.02 * rng.standard_normal((H, W)), 0, 1)
    tint = rng.uniform(0.8, 1.2, 3)
    mask = np.zeros((H, W), dtype=np.int64)
    boxes = []
    for cls in (1, 2):
        for _ in range(int(rng.integers(1, 3))):
            h = int(rng.integers(size // 5, size // 2)) if cls == 1 else int(rng.integers(size // 6, size // 3))
            w = int(rng.integers(size // 8, size // 4)) if cls == 1 else int(rng.integers(size // 4, size // 2))
            y0 = int(rng.integers(0, H - h))
            x0 = int(rng.integers(0, W - w))
            region = (slice(y0, y0 + h), slice(x0, x0 + w))
            mask[region] = cls
            if cls == 1:
                ir[region] = 0.85 + 0.05 * rng.standard_normal((h, w))
                vis[region] = 0.2 + 0.03 * rng.standard_normal((h, w))
            else:
                ir[region] = 0.5 + 0.03 * rng.standard_normal((h, w))
                stripes = 0.15 * np.sign(np.sin(np.arange(w) * 1.5))[None, :]
                vis[region] = 0.75 + stripes
            boxes.append(Box(cls, (x0 / W, y0 / H, (x0 + w) / W, (y0 + h) / H)))
    ir = np.clip(ndimage.gaussian_filter(ir, 0.7), 0, 1)
    vis = np.clip(vis, 0, 1)
    rgb = np.clip(vis[..., None] * tint[None, None, :], 0, 1)
    return ir, rgb, boxes, mask


def make_toy_dataset(root, split="train", n_pairs=4, size=32, seed=0):
    base = Path(root) / split
    for sub in ("ir", "vis", "ann"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n_pairs):
        ir, rgb, boxes, mask = make_scene(rng, size)
        stem = f"{i:05d}"
        save_image(base / "ir" / f"{stem}.png", ir)
        save_image(base / "vis" / f"{stem}.png", rgb)
        write_annotations(base / "ann" / f"{stem}.json", boxes, mask)
    return base

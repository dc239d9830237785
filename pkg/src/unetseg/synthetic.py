"""Synthetic "shapes" dataset: noisy images with 1-4 bright filled circles."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import SamplePair, save_image_png, save_mask_png, write_manifest


def circles_sample(rng: np.random.Generator, size: int = 64, max_circles: int = 4) -> SamplePair:
    """One image/mask pair; the mask is the union of the drawn circles."""
    yy, xx = np.mgrid[0:size, 0:size]
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(1, max_circles + 1))):
        r = rng.uniform(size * 0.06, size * 0.2)
        cy, cx = rng.uniform(r, size - r, size=2)
        mask |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    background = rng.uniform(0.1, 0.35)
    foreground = rng.uniform(0.55, 0.9)
    image = np.where(mask, foreground, background) + rng.normal(0.0, 0.05, size=(size, size))
    return SamplePair(np.clip(image, 0.0, 1.0).astype(np.float32), mask.astype(np.float32))


def make_circles_dataset(n: int, size: int = 64, seed: int = 0, max_circles: int = 4) -> list[SamplePair]:
    rng = np.random.default_rng(seed)
    return [circles_sample(rng, size, max_circles) for _ in range(n)]


def write_dataset(samples, out_dir, manifest_name: str = "manifest.tsv") -> Path:
    """Write samples as images/NNNN.png + masks/NNNN.png and a tab-separated manifest."""
    out_dir = Path(out_dir)
    pairs = []
    for i, s in enumerate(samples):
        img = out_dir / "images" / f"{i:04d}.png"
        msk = out_dir / "masks" / f"{i:04d}.png"
        save_image_png(s.image, img)
        save_mask_png(s.mask, msk)
        pairs.append((f"images/{img.name}", f"masks/{msk.name}"))
    manifest = out_dir / manifest_name
    write_manifest(pairs, manifest)
    return manifest

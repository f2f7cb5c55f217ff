"""Procedural toy corpus: smooth colour fields with soft shapes and stripes.

Stands in for LSDIR / UGC photographs in tests and the desk-scale demo.
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .degradation import DegradationRecipe, synth_degrade, write_image


def toy_image(seed: int, size: int = 128) -> np.ndarray:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    img = np.empty((size, size, 3), np.float32)
    for c in range(3):
        a, b, k = rng.uniform(-0.4, 0.4, 3)
        img[..., c] = 0.5 + a * (xx - 0.5) + b * (yy - 0.5) + 0.1 * k
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.15, 0.85, 2)
        ry, rx = rng.uniform(0.08, 0.3, 2)
        mask = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1.0).astype(np.float32)
        mask = cv2.GaussianBlur(mask, (0, 0), sigmaX=size / 64)
        img += mask[..., None] * rng.uniform(-0.35, 0.35, 3).astype(np.float32)
    freq, angle = rng.uniform(3, 8), rng.uniform(0, np.pi)
    stripes = np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))
    img += 0.05 * stripes[..., None]
    return np.clip(img, 0.0, 1.0)


def write_toy_corpus(root, n_lsdir: int = 4, n_pairs: int = 2, n_wild: int = 2,
                     size: int = 128, seed: int = 0) -> dict[str, Path]:
    """Lay out ``lsdir/``, ``ugc_pairs/{HR,LR}/`` and ``ugc_hr/`` under ``root``."""
    root = Path(root)
    dirs = {"lsdir": root / "lsdir", "ugc_pairs": root / "ugc_pairs", "ugc_hr": root / "ugc_hr"}
    k = seed * 1000
    for i in range(n_lsdir):
        write_image(dirs["lsdir"] / f"img{i:03d}.png", toy_image(k + i, size))
    recipe = DegradationRecipe.synthetic()
    for i in range(n_pairs):
        hr = toy_image(k + 100 + i, size)
        write_image(dirs["ugc_pairs"] / "HR" / f"pair{i:03d}.png", hr)
        write_image(dirs["ugc_pairs"] / "LR" / f"pair{i:03d}.png", synth_degrade(hr, recipe, k + i))
    for i in range(n_wild):
        write_image(dirs["ugc_hr"] / f"wild{i:03d}.png", toy_image(k + 200 + i, size))
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return dirs

"""Shared fixtures: a tiny corpus of structured images for training tests."""

import numpy as np
import pytest
from PIL import Image


def write_structured_images(root, count=10, size=80, seed=0):
    """Flat shapes over gradients: small images with strong, clean edges."""
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        gx = np.linspace(0, 1, size)[None, :, None]
        gy = np.linspace(0, 1, size)[:, None, None]
        img = (0.3 * rng.random(3) + 0.35 * gx * rng.random(3)
               + 0.35 * gy * rng.random(3))
        img = np.broadcast_to(img, (size, size, 3)).copy()
        for _ in range(3):
            color = rng.random(3)
            if rng.integers(0, 2) == 0:
                y0, x0 = rng.integers(5, size - 25, 2)
                h, w = rng.integers(10, 20, 2)
                img[y0:y0 + h, x0:x0 + w] = color
            else:
                cy, cx = rng.integers(15, size - 15, 2)
                r = int(rng.integers(6, 14))
                yy, xx = np.ogrid[:size, :size]
                img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = color
        p = root / f"img_{i:02d}.png"
        Image.fromarray((np.clip(img, 0, 1) * 255).astype(np.uint8)).save(p)
        paths.append(p)
    return paths


@pytest.fixture(scope="session")
def desk_corpus(tmp_path_factory):
    """(manifest path, image paths) for a ten-image desk-scale corpus."""
    root = tmp_path_factory.mktemp("corpus")
    paths = write_structured_images(root, count=10)
    manifest = root / "manifest.txt"
    manifest.write_text("\n".join(p.name for p in paths), encoding="utf-8")
    return manifest, paths

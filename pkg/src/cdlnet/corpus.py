"""Small grayscale image corpus built from the sample images bundled with
scikit-image and scikit-learn.  Used by the test-suite and for quick
experiments; real training should point the CLI at a directory of images.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

TRAIN_SOURCES = ("astronaut", "coffee", "chelsea", "rocket", "china", "brick",
                 "moon", "coins", "immunohistochemistry", "grass")
HELDOUT_SOURCES = (("camera", 2), ("flower", 3), ("clock", 2), ("gravel", 1))
ESTIMATOR_SOURCES = ("camera", "astronaut", "coffee", "chelsea", "coins",
                     "moon", "rocket", "clock", "china", "flower")


def _gray_u8(rgb):
    a = np.asarray(rgb)
    if a.dtype == bool:
        a = a.astype(np.uint8) * 255
    if a.ndim == 3:
        a = a[..., :3].astype(np.float64) @ np.array([0.2125, 0.7154, 0.0721])
    return np.clip(np.rint(a), 0, 255).astype(np.uint8)


def source_image(name) -> np.ndarray:
    """A named sample image as 2-D ``uint8``."""
    if name in ("china", "flower"):
        from sklearn.datasets import load_sample_image

        return _gray_u8(load_sample_image(f"{name}.jpg"))
    import skimage.data

    return _gray_u8(getattr(skimage.data, name)())


def _halve(a):
    h, w = (a.shape[0] // 2) * 2, (a.shape[1] // 2) * 2
    a = a[:h, :w].astype(np.float64)
    b = 0.25 * (a[0::2, 0::2] + a[0::2, 1::2] + a[1::2, 0::2] + a[1::2, 1::2])
    return np.rint(b).astype(np.uint8)


def _tiles(a, n, size, rng):
    h, w = a.shape
    out = []
    for _ in range(n):
        i = int(rng.integers(0, h - size + 1))
        j = int(rng.integers(0, w - size + 1))
        out.append(a[i:i + size, j:j + size].copy())
    return out


def desk_corpus(size=96, per_image=4, seed=0):
    """``(train, heldout)`` lists of ``uint8`` tiles from disjoint source images.

    Sources are down-sampled by two before tiling, which removes most
    compression artefacts and packs more structure into each tile.
    """
    rng = np.random.default_rng(seed)
    train = []
    for name in TRAIN_SOURCES:
        train += _tiles(_halve(source_image(name)), per_image, size, rng)
    heldout = []
    for name, count in HELDOUT_SOURCES:
        heldout += _tiles(_halve(source_image(name)), count, size, rng)
    return train, heldout


def estimator_corpus(size=256):
    """Ten natural images, centre-cropped to ``size x size``."""
    out = []
    for name in ESTIMATOR_SOURCES:
        a = source_image(name)
        i = (a.shape[0] - size) // 2
        j = (a.shape[1] - size) // 2
        out.append(a[i:i + size, j:j + size].copy())
    return out


def write_corpus(directory, images, prefix="img"):
    from .imageio import write_pgm

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, im in enumerate(images):
        p = d / f"{prefix}{i:03d}.pgm"
        write_pgm(p, im)
        paths.append(p)
    return paths

"""8-bit grayscale image files: binary PGM natively, PNG through Pillow."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import CDLError


class ImageFormatError(CDLError):
    """Unsupported or malformed image file."""


_PGM_HEADER = re.compile(rb"\AP5(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = _PGM_HEADER.match(data)
    if m is None:
        raise ImageFormatError(f"{path}: not a binary (P5) PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval > 255:
        raise ImageFormatError(f"{path}: unsupported bit depth (maxval {maxval}); only 8-bit images are supported")
    body = data[m.end():]
    if len(body) < w * h:
        raise ImageFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8, count=w * h).reshape(h, w).copy()


def write_pgm(path, img: np.ndarray):
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ImageFormatError("write_pgm expects a 2-D uint8 array")
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_raw(path) -> np.ndarray:
    """Read an 8-bit grayscale image as ``uint8``."""
    path = Path(path)
    if not path.exists():
        raise ImageFormatError(f"{path}: no such file")
    if path.suffix.lower() in (".pgm", ".pnm"):
        return read_pgm(path)
    if path.suffix.lower() == ".png":
        from PIL import Image as PILImage

        with PILImage.open(path) as im:
            if im.mode not in ("L", "P", "1"):
                raise ImageFormatError(
                    f"{path}: unsupported PNG mode {im.mode}; only 8-bit grayscale is supported"
                )
            return np.asarray(im.convert("L"), dtype=np.uint8).copy()
    raise ImageFormatError(f"{path}: unsupported image format {path.suffix!r} (use .pgm or .png)")


def load_image(path) -> np.ndarray:
    """Load an 8-bit grayscale image as float64 in ``[0, 1]``."""
    return read_raw(path).astype(np.float64) / 255.0


def quantize(img) -> np.ndarray:
    """Clamp a ``[0, 1]`` image and round to ``uint8``."""
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, img):
    """Write a ``[0, 1]`` float image (clamped) or a ``uint8`` image."""
    path = Path(path)
    arr = np.asarray(img)
    raw = arr if arr.dtype == np.uint8 else quantize(arr)
    if path.suffix.lower() in (".pgm", ".pnm"):
        write_pgm(path, raw)
    elif path.suffix.lower() == ".png":
        from PIL import Image as PILImage

        PILImage.fromarray(raw, mode="L").save(path)
    else:
        raise ImageFormatError(f"{path}: unsupported image format {path.suffix!r} (use .pgm or .png)")


def list_images(directory):
    d = Path(directory)
    if not d.is_dir():
        raise ImageFormatError(f"{d}: not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in (".pgm", ".pnm", ".png"))

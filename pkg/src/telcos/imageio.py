"""Binary PPM (P6) reading/writing, optional PNG via Pillow, and resampling."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = ["read_image", "write_ppm", "resize_bilinear", "ImageFormatError"]


class ImageFormatError(ValueError):
    pass


_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def read_image(path) -> np.ndarray:
    """Load an RGB image as an (H, W, 3) uint8 array."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"P6":
        m = _HEADER.match(raw)
        if not m:
            raise ImageFormatError(f"{path}: malformed PPM header")
        w, h, maxval = (int(g) for g in m.groups())
        if maxval != 255:
            raise ImageFormatError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
        body = raw[m.end() : m.end() + w * h * 3]
        if len(body) != w * h * 3:
            raise ImageFormatError(f"{path}: truncated PPM data")
        return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            from PIL import Image
        except ImportError as exc:  # pragma: no cover
            raise ImageFormatError(f"{path}: PNG input needs Pillow") from exc
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    raise ImageFormatError(f"{path}: unsupported image format (expected binary PPM or PNG)")


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"write_ppm needs an (H, W, 3) uint8 array, got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes())


def resize_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of an (H, W) or (H, W, C) array."""
    src_h, src_w = img.shape[:2]
    ys = (np.arange(h) + 0.5) * src_h / h - 0.5
    xs = (np.arange(w) + 0.5) * src_w / w - 0.5
    grid = np.meshgrid(ys, xs, indexing="ij")
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        out = ndimage.map_coordinates(a, grid, order=1, mode="nearest")
    else:
        out = np.stack([ndimage.map_coordinates(a[..., c], grid, order=1, mode="nearest") for c in range(a.shape[2])], axis=-1)
    if np.asarray(img).dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out

"""Raster image container, PNG/JPEG I/O and subpixel sampling.

Pixel intensities are kept as float64 in [0, 1] so downstream energy and
metric math never quantizes mid-pipeline. Coordinate convention everywhere:
origin at the top-left pixel center, x rightward, y downward.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


class ImageError(Exception):
    """Raised for unreadable, malformed or out-of-contract image data."""


@dataclass(frozen=True)
class Raster:
    """Immutable image: data has shape (height, width, channels), values in [0,1]."""

    width: int
    height: int
    channels: int
    data: np.ndarray

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ImageError(f"unsupported channel count {self.channels}")
        if self.width <= 0 or self.height <= 0:
            raise ImageError("zero-dimension image")
        if self.data.shape != (self.height, self.width, self.channels):
            raise ImageError(
                f"data shape {self.data.shape} does not match "
                f"{self.height}x{self.width}x{self.channels}"
            )
        if not np.all(np.isfinite(self.data)):
            raise ImageError("non-finite pixel values")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ImageError("pixel values outside [0,1]")
        self.data.setflags(write=False)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Raster":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        h, w, c = arr.shape
        return cls(width=w, height=h, channels=c, data=arr)

    def to_gray(self) -> np.ndarray:
        """Luma as a (height, width) float array."""
        if self.channels == 1:
            return self.data[:, :, 0]
        r, g, b = self.data[:, :, 0], self.data[:, :, 1], self.data[:, :, 2]
        return 0.299 * r + 0.587 * g + 0.114 * b


def load_raster(path) -> Raster:
    """Decode a PNG or JPEG file into a [0,1]-normalized Raster.

    Grayscale files stay single-channel; anything with color becomes RGB.
    """
    path = Path(path)
    if not path.is_file():
        raise ImageError(f"cannot read image file: {path}")
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "JPEG"):
                raise ImageError(f"unsupported format {im.format!r}: {path}")
            if im.mode in ("L", "I;16", "I", "1"):
                im = im.convert("L")
            else:
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except ImageError:
        raise
    except Exception as exc:  # Pillow raises several decode error types
        raise ImageError(f"failed to decode {path}: {exc}") from exc
    if arr.size == 0:
        raise ImageError(f"zero-dimension image: {path}")
    return Raster.from_array(arr)


def write_raster(img: Raster, path) -> None:
    """Encode as 8-bit PNG. Round-trip error is at most 1/255 per channel."""
    path = Path(path)
    q = np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)
    if img.channels == 1:
        pil = Image.fromarray(q[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(q, mode="RGB")
    try:
        pil.save(path, format="PNG")
    except OSError as exc:
        raise ImageError(f"failed to write {path}: {exc}") from exc


def sample_bilinear(img: Raster, p) -> np.ndarray:
    """Bilinear sample at continuous coordinates p = (x, y).

    Accepts a single point (2,) or a batch (N, 2); returns (channels,) or
    (N, channels). Exact at integer pixel coordinates.
    """
    pts = np.atleast_2d(np.asarray(p, dtype=np.float64))
    x, y = pts[:, 0], pts[:, 1]
    if np.any(x < 0) or np.any(x > img.width - 1) or np.any(y < 0) or np.any(y > img.height - 1):
        raise ImageError("sample point outside image domain")
    x0 = np.clip(np.floor(x).astype(int), 0, img.width - 2) if img.width > 1 else np.zeros_like(x, int)
    y0 = np.clip(np.floor(y).astype(int), 0, img.height - 2) if img.height > 1 else np.zeros_like(y, int)
    x1 = np.minimum(x0 + 1, img.width - 1)
    y1 = np.minimum(y0 + 1, img.height - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    d = img.data
    out = (
        d[y0, x0] * (1 - fx) * (1 - fy)
        + d[y0, x1] * fx * (1 - fy)
        + d[y1, x0] * (1 - fx) * fy
        + d[y1, x1] * fx * fy
    )
    if np.ndim(p) == 1:
        return out[0]
    return out

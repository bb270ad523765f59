"""Raster containers and the geometry primitives shared by every stage.

Images are plain numpy arrays, row-major with a top-left origin:

* raster    -- ``uint8`` of shape ``(H, W)`` or ``(H, W, 3)``
* prob map  -- ``float32`` of shape ``(H, W)`` with values in ``[0, 1]``
* binary    -- ``bool`` of shape ``(H, W)``
* label     -- ``uint8`` of shape ``(H, W)`` holding BACKGROUND/NORMAL/TUMOR

Indices are always ``(row, col)``; a :class:`Region` is given as
``(x0, y0, width, height)`` in pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

BACKGROUND = 0
NORMAL = 1
TUMOR = 2
LABELS = (BACKGROUND, NORMAL, TUMOR)

ArrayLike = Union[np.ndarray, np.memmap]


class RasterError(ValueError):
    """Raised when an array violates a raster invariant."""


@dataclass(frozen=True)
class Region:
    x0: int
    y0: int
    width: int
    height: int

    def __post_init__(self):
        if self.width < 0 or self.height < 0:
            raise RasterError(f"negative region size {self.width}x{self.height}")

    @property
    def x1(self) -> int:
        return self.x0 + self.width

    @property
    def y1(self) -> int:
        return self.y0 + self.height

    def clip(self, width: int, height: int) -> "Region":
        """Intersection with the canvas ``[0, width) x [0, height)``."""
        x0, y0 = max(self.x0, 0), max(self.y0, 0)
        x1, y1 = min(self.x1, width), min(self.y1, height)
        return Region(x0, y0, max(x1 - x0, 0), max(y1 - y0, 0))


def as_raster(a, channels=None) -> np.ndarray:
    """Validate an 8-bit raster and return it as a C-contiguous array."""
    a = np.ascontiguousarray(a)
    if a.dtype != np.uint8:
        raise RasterError(f"raster must be uint8, got {a.dtype}")
    if a.ndim == 2:
        ch = 1
    elif a.ndim == 3 and a.shape[2] in (1, 3):
        ch = a.shape[2]
    else:
        raise RasterError(f"bad raster shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise RasterError("raster must be at least 1x1")
    if channels is not None and ch != channels:
        raise RasterError(f"expected {channels} channel(s), got {ch}")
    return a


def as_probmap(a, copy=False) -> np.ndarray:
    """Validate a probability map: 2-D, finite, every value in [0, 1]."""
    a = np.array(a, dtype=np.float32) if copy else np.asarray(a, dtype=np.float32)
    if a.ndim != 2:
        raise RasterError(f"prob map must be 2-D, got shape {a.shape}")
    if a.size and not (a.min() >= 0.0 and a.max() <= 1.0):
        raise RasterError("prob map values must lie in [0, 1]")
    return a


def as_labels(a) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise RasterError(f"label mask must be 2-D, got shape {a.shape}")
    if not np.isin(a, LABELS).all():
        raise RasterError("label mask holds values outside {0, 1, 2}")
    return a.astype(np.uint8, copy=False)


def to_float(r: np.ndarray) -> np.ndarray:
    """8-bit samples to float64 in [0, 1]."""
    return np.asarray(r, dtype=np.float64) / 255.0


def crop(r: ArrayLike, region: Region, pad_value=0) -> np.ndarray:
    """Copy ``region`` out of ``r``, padding anything off-canvas.

    Works on any 2-D or 3-D array (including memory maps); the source is
    never modified and the result is always a fresh array.
    """
    if region.width < 1 or region.height < 1:
        raise RasterError("crop region must be at least 1x1")
    h, w = r.shape[:2]
    out = np.full((region.height, region.width) + r.shape[2:], pad_value, dtype=r.dtype)
    inner = region.clip(w, h)
    if inner.width and inner.height:
        dy, dx = inner.y0 - region.y0, inner.x0 - region.x0
        out[dy:dy + inner.height, dx:dx + inner.width] = r[inner.y0:inner.y1, inner.x0:inner.x1]
    return out


def paste_accumulate(dst_value: np.ndarray, dst_weight: np.ndarray, src: np.ndarray,
                     weights: np.ndarray, at: Region) -> None:
    """Add ``weights * src`` into ``dst_value`` and ``weights`` into ``dst_weight``.

    ``at`` places the top-left of ``src`` in destination coordinates. Source
    cells falling outside the destination are dropped. Updates in place.
    """
    if src.shape != weights.shape:
        raise RasterError(f"src {src.shape} and weights {weights.shape} differ")
    if (at.height, at.width) != src.shape[:2]:
        raise RasterError("region size does not match src")
    h, w = dst_value.shape[:2]
    inner = at.clip(w, h)
    if not (inner.width and inner.height):
        return
    sy, sx = inner.y0 - at.y0, inner.x0 - at.x0
    s = (slice(sy, sy + inner.height), slice(sx, sx + inner.width))
    d = (slice(inner.y0, inner.y1), slice(inner.x0, inner.x1))
    wt = weights[s]
    dst_value[d] += wt * src[s]
    dst_weight[d] += wt


def nearest_upsample(m: np.ndarray, target_w: int, target_h: int, factor=None) -> np.ndarray:
    """Nearest-neighbour enlargement of a prob map or binary mask.

    Without ``factor`` an output pixel ``(y, x)`` reads source pixel
    ``(y * h // target_h, x * w // target_w)``. With an integer ``factor``
    (a pyramid scale ``2**n``) it reads ``(y // factor, x // factor)``, which
    inverts the even-index decimation used by the pyramid exactly.
    """
    h, w = m.shape[:2]
    if target_w < w or target_h < h:
        raise RasterError(f"cannot upsample {w}x{h} down to {target_w}x{target_h}")
    if factor is None:
        rows = np.arange(target_h) * h // target_h
        cols = np.arange(target_w) * w // target_w
    else:
        rows = np.minimum(np.arange(target_h) // factor, h - 1)
        cols = np.minimum(np.arange(target_w) // factor, w - 1)
    return m[rows[:, None], cols[None, :]]

"""lαβ colour space and foreground-only (partial) Reinhard normalisation.

Background -- bright slide glass and holes in the tissue -- is found by an
RGB threshold. Channel statistics are measured on the remaining tissue
pixels only, only those pixels are remapped, and background bytes pass
through untouched.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .raster import RasterError, as_raster

RGB2LMS = np.array([[0.3811, 0.5783, 0.0402],
                    [0.1967, 0.7244, 0.0782],
                    [0.0241, 0.1288, 0.8444]])
LMS2RGB = np.linalg.inv(RGB2LMS)

_LOG2LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array(
    [[1.0, 1.0, 1.0], [1.0, 1.0, -2.0], [1.0, -1.0, 0.0]])
_LAB2LOG = np.linalg.inv(_LOG2LAB)

LMS_FLOOR = 1e-6


class DegenerateStatsError(ValueError):
    pass


@dataclass(frozen=True)
class ColorStats:
    mean_l: float
    mean_a: float
    mean_b: float
    std_l: float
    std_a: float
    std_b: float

    def __post_init__(self):
        if min(self.std_l, self.std_a, self.std_b) < 0:
            raise ValueError("standard deviations must be non-negative")

    @property
    def means(self) -> np.ndarray:
        return np.array([self.mean_l, self.mean_a, self.mean_b])

    @property
    def stds(self) -> np.ndarray:
        return np.array([self.std_l, self.std_a, self.std_b])

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d) -> "ColorStats":
        return cls(**{k: float(d[k]) for k in cls.__dataclass_fields__})

    @classmethod
    def from_json(cls, text: str) -> "ColorStats":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class BackgroundThreshold:
    r_thr: int = 235
    g_thr: int = 210
    b_thr: int = 235

    def __post_init__(self):
        for v in (self.r_thr, self.g_thr, self.b_thr):
            if not 0 <= v <= 255:
                raise ValueError(f"threshold {v} outside [0, 255]")

    def as_tuple(self):
        return (self.r_thr, self.g_thr, self.b_thr)


def _rgb_to_lab_pixels(px: np.ndarray) -> np.ndarray:
    """(n, 3) uint8 -> (n, 3) float64 lαβ."""
    lms = (px.astype(np.float64) / 255.0) @ RGB2LMS.T
    return np.log10(np.maximum(lms, LMS_FLOOR)) @ _LOG2LAB.T


def _lab_to_rgb_pixels(lab: np.ndarray) -> np.ndarray:
    rgb = (10.0 ** (lab @ _LAB2LOG.T)) @ LMS2RGB.T
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def rgb_to_lab(r: np.ndarray):
    """Split an RGB raster into float64 ``(l, alpha, beta)`` planes."""
    r = as_raster(r, channels=3)
    lab = _rgb_to_lab_pixels(r.reshape(-1, 3)).reshape(r.shape)
    return lab[..., 0], lab[..., 1], lab[..., 2]


def lab_to_rgb(l, a, b) -> np.ndarray:
    """Inverse of :func:`rgb_to_lab`; out-of-gamut samples clamp to [0, 255]."""
    l, a, b = (np.asarray(c, dtype=np.float64) for c in (l, a, b))
    if not (l.shape == a.shape == b.shape):
        raise RasterError("lαβ planes differ in shape")
    lab = np.stack([l, a, b], axis=-1)
    return _lab_to_rgb_pixels(lab.reshape(-1, 3)).reshape(lab.shape)


def background_mask(r: np.ndarray, thr: BackgroundThreshold = BackgroundThreshold()) -> np.ndarray:
    """True where every channel reaches its threshold (glass / holes)."""
    r = np.asarray(r)
    if r.ndim != 3 or r.shape[2] != 3:
        raise RasterError("background_mask needs a 3-channel raster")
    return (r[..., 0] >= thr.r_thr) & (r[..., 1] >= thr.g_thr) & (r[..., 2] >= thr.b_thr)


def _stats_from_pixels(lab: np.ndarray) -> ColorStats:
    if lab.shape[0] < 2:
        raise DegenerateStatsError("degenerate foreground: fewer than 2 tissue pixels")
    mean = lab.mean(axis=0)
    # Constant channels must report exactly zero spread.
    std = np.where(np.ptp(lab, axis=0) == 0, 0.0, lab.std(axis=0))
    return ColorStats(*mean.tolist(), *std.tolist())


def masked_stats(l, a, b, fg) -> ColorStats:
    """Per-channel mean and population std over the pixels where ``fg`` is true."""
    fg = np.asarray(fg, dtype=bool)
    lab = np.stack([np.asarray(c)[fg] for c in (l, a, b)], axis=-1)
    return _stats_from_pixels(lab)


def _row_blocks(height: int, block_rows):
    step = height if not block_rows else block_rows
    for y in range(0, height, step):
        yield slice(y, min(y + step, height))


def image_stats(r: np.ndarray, thr: BackgroundThreshold = BackgroundThreshold(),
                block_rows=None) -> ColorStats:
    """Foreground lαβ statistics of an RGB raster (reference-image targets).

    ``block_rows`` bounds the float working set for very large rasters; the
    two-pass reduction runs over fixed row blocks in order, so results do
    not depend on anything but the block size.
    """
    r = as_raster(r, channels=3) if block_rows is None else r
    if block_rows is None:
        return _stats_from_pixels(_rgb_to_lab_pixels(r[~background_mask(r, thr)]))
    n, total = 0, np.zeros(3)
    lo, hi = np.full(3, np.inf), np.full(3, -np.inf)
    for rows in _row_blocks(r.shape[0], block_rows):
        blk = np.asarray(r[rows])
        lab = _rgb_to_lab_pixels(blk[~background_mask(blk, thr)])
        if lab.shape[0]:
            lo, hi = np.minimum(lo, lab.min(axis=0)), np.maximum(hi, lab.max(axis=0))
        n += lab.shape[0]
        total += lab.sum(axis=0)
    if n < 2:
        raise DegenerateStatsError("degenerate foreground: fewer than 2 tissue pixels")
    mean = total / n
    sq = np.zeros(3)
    for rows in _row_blocks(r.shape[0], block_rows):
        blk = np.asarray(r[rows])
        lab = _rgb_to_lab_pixels(blk[~background_mask(blk, thr)])
        sq += ((lab - mean) ** 2).sum(axis=0)
    std = np.where(lo == hi, 0.0, np.sqrt(sq / n))
    return ColorStats(*mean.tolist(), *std.tolist())


def partial_normalize(src: np.ndarray, target: ColorStats,
                      thr: BackgroundThreshold = BackgroundThreshold(),
                      block_rows=None, out=None) -> np.ndarray:
    """Match tissue colour statistics of ``src`` to ``target``.

    >>> img = np.full((2, 2, 3), 250, np.uint8); img[0] = (120, 60, 150)
    >>> img[0, 1] = (140, 70, 160)
    >>> out = partial_normalize(img, image_stats(img))
    >>> bool((out[1] == img[1]).all())
    True
    """
    own = image_stats(src, thr, block_rows=block_rows)
    if np.any(own.stds == 0):
        raise DegenerateStatsError("degenerate source statistics: zero standard deviation")
    if out is None:
        out = np.array(src, dtype=np.uint8)
    for rows in _row_blocks(out.shape[0], block_rows):
        blk = np.array(src[rows])
        fg = ~background_mask(blk, thr)
        lab = _rgb_to_lab_pixels(blk[fg])
        blk[fg] = _lab_to_rgb_pixels((lab - own.means) / own.stds * target.stds + target.means)
        out[rows] = blk
    return out

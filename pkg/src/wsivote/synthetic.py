"""Synthetic H&E-like slides with label masks, for tests and demos.

Labels are drawn on a coarse grid of ``block`` pixel cells so every
pyramid level up to ``log2(block)`` represents them exactly.
"""

from __future__ import annotations

import numpy as np

from .raster import BACKGROUND, NORMAL, TUMOR

# Mean RGB per label: glass, eosin-dominated stroma, hematoxylin-dense tumour.
LABEL_RGB = {BACKGROUND: (245, 244, 246), NORMAL: (200, 135, 180), TUMOR: (115, 65, 145)}
TEXTURE_SIGMA = 14.0


def coarse_labels(cells_w: int, cells_h: int, rng, tumour_blobs: int = 3) -> np.ndarray:
    """Tissue ellipse with tumour blobs, one label per cell; tumour blobs are 2x2-cell aligned."""
    yy, xx = np.mgrid[0:cells_h, 0:cells_w]
    cy, cx = (cells_h - 1) / 2, (cells_w - 1) / 2
    tissue = ((yy - cy) / (0.45 * cells_h)) ** 2 + ((xx - cx) / (0.45 * cells_w)) ** 2 <= 1.0
    lab = np.where(tissue, NORMAL, BACKGROUND).astype(np.uint8)
    hw, hh = max(cells_w // 2, 1), max(cells_h // 2, 1)
    sy, sx = np.mgrid[0:hh, 0:hw]
    for _ in range(tumour_blobs):
        by, bx = rng.uniform(0.25, 0.75) * hh, rng.uniform(0.25, 0.75) * hw
        r = rng.uniform(0.12, 0.25) * min(hh, hw) + 0.5
        blob = (sy - by) ** 2 + (sx - bx) ** 2 <= r * r
        big = np.kron(blob, np.ones((2, 2), bool))[:cells_h, :cells_w]
        full = np.zeros_like(tissue)
        full[:big.shape[0], :big.shape[1]] = big
        lab[full & tissue] = TUMOR
    return lab


def render(labels: np.ndarray, rng, texture_sigma: float = TEXTURE_SIGMA) -> np.ndarray:
    """Colour a label mask with per-label mean colour, smooth texture and pixel noise."""
    h, w = labels.shape
    lut = np.array([LABEL_RGB[k] for k in (BACKGROUND, NORMAL, TUMOR)], np.float32)
    img = lut[labels]
    tissue = labels != BACKGROUND
    low = rng.standard_normal((h // 16 + 2, w // 16 + 2), dtype=np.float32)
    low = np.kron(low, np.ones((16, 16), np.float32))[:h, :w]
    noise = rng.standard_normal((h, w), dtype=np.float32)
    tex = texture_sigma * (0.6 * low + 0.8 * noise)
    stained = img + tex[..., None] * np.array([1.0, 0.8, 0.6], np.float32)
    # glass stays inside the background box so the mask is stable
    glass = np.clip(img + 2.0 * noise[..., None], 237, 255)
    img = np.where(tissue[..., None], stained, glass)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synthetic_slide(width: int = 1024, height: int = 1024, seed: int = 0, block: int = 128,
                    tumour_blobs: int = 3):
    """(RGB raster, label mask) of the given size."""
    rng = np.random.default_rng(seed)
    cw, ch = -(-width // block), -(-height // block)
    coarse = coarse_labels(cw, ch, rng, tumour_blobs)
    labels = np.kron(coarse, np.ones((block, block), np.uint8))[:height, :width]
    return render(labels, rng), np.ascontiguousarray(labels)


def stained_image(width: int = 256, height: int = 256, seed: int = 0, tint=(0.0, 0.0, 0.0)):
    """Small irregular tissue image with a colour cast, for normalisation tests."""
    rng = np.random.default_rng(seed)
    cells = rng.random((height // 16 + 1, width // 16 + 1))
    coarse = np.where(cells < 0.3, BACKGROUND, np.where(cells < 0.75, NORMAL, TUMOR)).astype(np.uint8)
    labels = np.kron(coarse, np.ones((16, 16), np.uint8))[:height, :width]
    img = render(labels, rng).astype(np.float32)
    tissue = labels != BACKGROUND
    img[tissue] += np.asarray(tint, np.float32)
    out = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    out[~tissue] = np.maximum(out[~tissue], np.array([240, 240, 240], np.uint8))
    return out


def write_synthetic_slide_npy(image_path, labels_path, width: int, height: int, seed: int = 0,
                              block: int = 128, band_rows: int = 1024):
    """Render a slide straight into ``.npy`` memory maps, one band of rows at a time."""
    rng = np.random.default_rng(seed)
    cw, ch = -(-width // block), -(-height // block)
    coarse = coarse_labels(cw, ch, rng, tumour_blobs=max(3, (cw * ch) // 64))
    img = np.lib.format.open_memmap(image_path, mode="w+", dtype=np.uint8, shape=(height, width, 3))
    lab = np.lib.format.open_memmap(labels_path, mode="w+", dtype=np.uint8, shape=(height, width))
    band_rows = max(block, band_rows // block * block)
    for i, y in enumerate(range(0, height, band_rows)):
        y1 = min(y + band_rows, height)
        rows = coarse[y // block:-(-y1 // block)]
        band = np.kron(rows, np.ones((block, block), np.uint8))[:y1 - y, :width]
        lab[y:y1] = band
        img[y:y1] = render(band, np.random.default_rng([seed, i]))
    img.flush()
    lab.flush()
    del img, lab

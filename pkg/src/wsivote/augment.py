"""Paired image/label augmentation: flips, 90-degree rotations, crops, translations.

Every op moves image and labels through the same index mapping, so labels
are never resampled. Ops are strings (``"flip-h"``, ``"flip-v"``,
``"rot90"``) or dicts::

    {"op": "rot90", "k": 3}
    {"op": "crop", "width": 256, "height": 256}            # seeded position
    {"op": "crop", "x": 10, "y": 20, "width": 256, "height": 256}
    {"op": "translate", "dx": 30, "dy": -12}
    {"op": "translate", "max_shift": 64}                   # seeded offset
"""

from __future__ import annotations

import numpy as np

from .raster import BACKGROUND, RasterError, Region, crop

IMAGE_FILL = 255


class AugmentError(ValueError):
    pass


def _parse(op):
    if isinstance(op, str):
        return {"op": op}
    if "op" not in op:
        raise AugmentError(f"augmentation op without a name: {op}")
    return dict(op)


def apply_op(img: np.ndarray, gt: np.ndarray, op, rng=None):
    """Apply one op to an (image, labels) pair; returns new arrays."""
    op = _parse(op)
    if img.shape[:2] != gt.shape[:2]:
        raise RasterError(f"image {img.shape[:2]} and labels {gt.shape[:2]} differ")
    rng = rng if rng is not None else np.random.default_rng(0)
    name = op["op"]
    h, w = gt.shape[:2]
    if name == "flip-h":
        return img[:, ::-1].copy(), gt[:, ::-1].copy()
    if name == "flip-v":
        return img[::-1].copy(), gt[::-1].copy()
    if name == "rot90":
        k = int(op.get("k", 1)) % 4
        return np.rot90(img, k).copy(), np.rot90(gt, k).copy()
    if name == "crop":
        cw, ch = int(op["width"]), int(op["height"])
        if cw > w or ch > h or cw < 1 or ch < 1:
            raise AugmentError(f"crop {cw}x{ch} does not fit a {w}x{h} image")
        x = int(op["x"]) if "x" in op else int(rng.integers(0, w - cw + 1))
        y = int(op["y"]) if "y" in op else int(rng.integers(0, h - ch + 1))
        if x < 0 or y < 0 or x + cw > w or y + ch > h:
            raise AugmentError(f"crop at ({x}, {y}) leaves the image")
        return img[y:y + ch, x:x + cw].copy(), gt[y:y + ch, x:x + cw].copy()
    if name == "translate":
        if "dx" in op or "dy" in op:
            dx, dy = int(op.get("dx", 0)), int(op.get("dy", 0))
        else:
            s = int(op.get("max_shift", 32))
            dx, dy = (int(v) for v in rng.integers(-s, s + 1, size=2))
        region = Region(-dx, -dy, w, h)
        return crop(img, region, IMAGE_FILL), crop(gt, region, BACKGROUND)
    raise AugmentError(f"unknown augmentation op {name!r}")


def augment(img: np.ndarray, gt: np.ndarray, ops, seed: int = 0):
    """One augmented pair per op, each applied to the original pair.

    Seeded ops draw from a generator keyed by ``(seed, op index)`` so the
    output for one op does not depend on the others in the list.
    """
    out = []
    for i, op in enumerate(ops):
        rng = np.random.default_rng([int(seed), i])
        out.append(apply_op(img, gt, op, rng))
    return out


def compose(img, gt, ops, seed: int = 0):
    """Apply ``ops`` in sequence and return the final pair."""
    for i, op in enumerate(ops):
        img, gt = apply_op(img, gt, op, np.random.default_rng([int(seed), i]))
    return img, gt

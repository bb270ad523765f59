"""Gaussian pyramid: 5-tap binomial reduce/expand and multi-level stacks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .raster import RasterError

KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
_KERNEL_INT = (1, 4, 6, 4, 1)

MAX_LEVEL = 7
DEFAULT_LEVELS = (0, 2, 3, 4, 5, 6, 7)


def level_shape(width: int, height: int, level: int):
    """(width, height) of pyramid level ``level`` for a level-0 size."""
    s = 1 << level
    return -(-width // s), -(-height // s)


def pyr_down_shape(width: int, height: int):
    if width < 2 or height < 2:
        raise RasterError(f"cannot downsample a {width}x{height} image")
    return -(-width // 2), -(-height // 2)


def _reduce_axis(x: np.ndarray, axis: int, taps) -> np.ndarray:
    n = x.shape[axis]
    out_n = -(-n // 2)
    pad = [(0, 0)] * x.ndim
    pad[axis] = (2, 2)
    xp = np.pad(x, pad, mode="edge")
    acc = None
    for t, k in enumerate(taps):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(t, t + 2 * out_n - 1, 2)
        term = xp[tuple(sl)] * k
        acc = term if acc is None else acc + term
    return acc


def pyr_down(r: np.ndarray) -> np.ndarray:
    """Blur with (1,4,6,4,1)/16 separably (edge replication) and keep even indices.

    8-bit input is filtered in exact integer arithmetic and rounded half up;
    float input returns float32.
    """
    r = np.asarray(r)
    h, w = r.shape[:2]
    pyr_down_shape(w, h)
    if r.dtype == np.uint8:
        acc = _reduce_axis(r.astype(np.int32), 0, _KERNEL_INT)
        acc = _reduce_axis(acc, 1, _KERNEL_INT)
        return ((acc + 128) >> 8).astype(np.uint8)
    acc = _reduce_axis(r.astype(np.float64), 0, KERNEL)
    acc = _reduce_axis(acc, 1, KERNEL)
    return acc.astype(np.float32)


def _expand_axis(x: np.ndarray, axis: int, out_n: int) -> np.ndarray:
    n = x.shape[axis]
    pad = [(0, 0)] * x.ndim
    pad[axis] = (1, 1)
    xp = np.pad(x, pad, mode="edge")

    def take(a, b):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(a, b)
        return xp[tuple(sl)]

    centre = take(1, n + 1)
    even = (take(0, n) + 6.0 * centre + take(2, n + 2)) / 8.0
    odd = (centre + take(2, n + 2)) / 2.0
    shape = list(x.shape)
    shape[axis] = 2 * n
    out = np.empty(shape, dtype=np.float64)
    sl_e = [slice(None)] * x.ndim
    sl_o = [slice(None)] * x.ndim
    sl_e[axis], sl_o[axis] = slice(0, None, 2), slice(1, None, 2)
    out[tuple(sl_e)] = even
    out[tuple(sl_o)] = odd
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(0, out_n)
    return out[tuple(sl)]


def pyr_expand(m: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    """One expand step: zero-insertion upsample filtered by 4x the reduce kernel.

    Written in polyphase form with edge replication of the source, so a
    constant map stays constant up to the border.
    """
    m = np.asarray(m, dtype=np.float64)
    h, w = m.shape
    if (-(-target_w // 2), -(-target_h // 2)) != (w, h):
        raise RasterError(f"{target_w}x{target_h} is not one doubling of {w}x{h}")
    out = _expand_axis(_expand_axis(m, 0, target_h), 1, target_w)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def expand_to(m: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    """Repeated :func:`pyr_expand` from a coarse level up to ``target`` size."""
    h, w = np.shape(m)
    chain = [(target_w, target_h)]
    while chain[-1] != (w, h):
        cw, ch = chain[-1]
        if cw <= w and ch <= h:
            raise RasterError(f"{target_w}x{target_h} is not reachable from {w}x{h} by doublings")
        chain.append((-(-cw // 2), -(-ch // 2)))
    out = np.asarray(m, dtype=np.float32)
    for tw, th in reversed(chain[:-1]):
        out = pyr_expand(out, tw, th)
    return out


def resize_bilinear(a: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of an 8-bit raster or a float map (float32 out)."""
    a = np.asarray(a)
    if a.dtype == np.uint8:
        if a.ndim == 3 and a.shape[2] == 3:
            return np.asarray(Image.fromarray(a, "RGB").resize((width, height), Image.BILINEAR))
        return np.asarray(Image.fromarray(a.reshape(a.shape[:2])).resize((width, height),
                                                                          Image.BILINEAR))
    im = Image.fromarray(np.ascontiguousarray(a, dtype=np.float32), "F")
    return np.asarray(im.resize((width, height), Image.BILINEAR), dtype=np.float32)


@dataclass
class LevelStack:
    level0_width: int
    level0_height: int
    levels: dict = field(default_factory=dict)

    def __post_init__(self):
        for n, img in self.levels.items():
            self._check(n, img)

    def _check(self, n, img):
        if not 0 <= n <= MAX_LEVEL:
            raise RasterError(f"level {n} outside 0..{MAX_LEVEL}")
        want = level_shape(self.level0_width, self.level0_height, n)
        got = (img.shape[1], img.shape[0])
        if got != want:
            raise RasterError(f"level {n} is {got[0]}x{got[1]}, expected {want[0]}x{want[1]}")

    def __getitem__(self, n):
        return self.levels[n]

    def __setitem__(self, n, img):
        self._check(n, img)
        self.levels[n] = img

    def __contains__(self, n):
        return n in self.levels

    def __iter__(self):
        return iter(sorted(self.levels))

    def __len__(self):
        return len(self.levels)


def build_stack(r: np.ndarray, levels=DEFAULT_LEVELS) -> LevelStack:
    """Downsample ``r`` repeatedly, keeping the requested levels (0 = ``r`` itself)."""
    levels = sorted(set(levels))
    if any(not 0 <= n <= MAX_LEVEL for n in levels):
        raise RasterError(f"levels must lie in 0..{MAX_LEVEL}, got {levels}")
    h, w = r.shape[:2]
    stack = LevelStack(w, h)
    cur = r
    for n in range(0, (levels[-1] if levels else -1) + 1):
        if n > 0:
            cur = pyr_down(cur)
        if n in levels:
            stack[n] = cur
    return stack


"""Shifted cropping and weighted overlapping assembly.

An image is tiled four times with half-patch offsets, so every block
boundary of one group falls in the interior of another group's blocks.
Tile predictions are merged with a weight map that is zero on the tile
border and peaks at the centre::

    W(i, j) = Db / (Db + Dc)
    F(y, x) = sum_k W(P_k(y, x)) * G_k(P_k(y, x)) / sum_k W(P_k(y, x))

``Db`` is the distance to the nearest tile border and ``Dc`` the Euclidean
distance to the tile centre ``((p-1)/2, (p-1)/2)``. ``P_k`` maps an image
pixel to its tile and in-tile offset in group ``k``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .raster import Region, RasterError, as_probmap, paste_accumulate


class TilingError(RasterError):
    pass


@dataclass(frozen=True)
class ShiftGroupPlan:
    patch: int
    shifts: tuple
    image_w: int
    image_h: int

    def __post_init__(self):
        if self.patch < 2 or self.patch % 2:
            raise TilingError(f"patch must be even and >= 2, got {self.patch}")
        if self.image_w < 1 or self.image_h < 1:
            raise TilingError("image must be at least 1x1")
        for dx, dy in self.shifts:
            if not (0 <= dx < self.patch and 0 <= dy < self.patch):
                raise TilingError(f"shift {(dx, dy)} outside [0, patch)")
        if len(set(self.shifts)) != len(self.shifts):
            raise TilingError("duplicate shifts")

    def grid(self, k: int):
        """(rows, cols) of tiles in group ``k``."""
        dx, dy = self.shifts[k]
        p = self.patch
        return -(-(self.image_h + dy) // p), -(-(self.image_w + dx) // p)

    def origin(self, k: int, row: int, col: int):
        dx, dy = self.shifts[k]
        return col * self.patch - dx, row * self.patch - dy

    def origins(self, k: int):
        """Tile origins ``(x, y)`` of group ``k`` in row-major order."""
        rows, cols = self.grid(k)
        return [self.origin(k, r, c) for r in range(rows) for c in range(cols)]

    def n_tiles(self, k: int) -> int:
        rows, cols = self.grid(k)
        return rows * cols

    def locate(self, k: int, y: int, x: int):
        """The P_k transform: image pixel -> (tile row, tile col, in-tile y, in-tile x)."""
        dx, dy = self.shifts[k]
        ty, iy = divmod(y + dy, self.patch)
        tx, ix = divmod(x + dx, self.patch)
        return ty, tx, iy, ix

    def rows_touching(self, k: int, y0: int, y1: int):
        """Tile rows of group ``k`` overlapping image rows ``[y0, y1)``."""
        dy = self.shifts[k][1]
        first = (y0 + dy) // self.patch
        last = (y1 - 1 + dy) // self.patch
        return range(first, min(last, self.grid(k)[0] - 1) + 1)

    def canonical_order(self):
        """Group indices in the fixed reduction order (sorted by shift)."""
        return sorted(range(len(self.shifts)), key=lambda k: self.shifts[k])


def default_shifts(patch: int):
    h = patch // 2
    return ((0, 0), (h, 0), (0, h), (h, h))


def make_plan(image_w: int, image_h: int, patch: int = 448, shifts=None) -> ShiftGroupPlan:
    shifts = default_shifts(patch) if shifts is None else tuple(tuple(map(int, s)) for s in shifts)
    return ShiftGroupPlan(patch, shifts, image_w, image_h)


def weight_map(patch: int) -> np.ndarray:
    """Border-suppressing weight map W = Db / (Db + Dc), exactly 0 where Db = 0."""
    if patch < 2:
        raise TilingError("patch must be >= 2")
    idx = np.arange(patch, dtype=np.float64)
    border = np.minimum(idx, patch - 1 - idx)
    db = np.minimum(border[:, None], border[None, :])
    c = (patch - 1) / 2.0
    d = (idx - c) ** 2
    dc = np.sqrt(d[:, None] + d[None, :])
    with np.errstate(invalid="ignore", divide="ignore"):
        w = db / (db + dc)
    w[db == 0] = 0.0
    return w


class Accumulator:
    """Weighted sums for one horizontal band ``[y0, y0 + height)`` of an image."""

    # value, weight (float64), plain sum (float32), cover count (uint8),
    # plus the mask and float32 output produced by result()
    BYTES_PER_PIXEL = 8 + 8 + 4 + 1 + 1 + 4

    def __init__(self, width: int, height: int, y0: int = 0):
        self.y0 = y0
        self.value = np.zeros((height, width), np.float64)
        self.weight = np.zeros((height, width), np.float64)
        self.plain = np.zeros((height, width), np.float32)
        self.count = np.zeros((height, width), np.uint8)

    @property
    def nbytes(self) -> int:
        return self.value.size * self.BYTES_PER_PIXEL

    def add(self, tile: np.ndarray, x: int, y: int, weights: np.ndarray) -> None:
        at = Region(x, y - self.y0, tile.shape[1], tile.shape[0])
        paste_accumulate(self.value, self.weight, tile, weights, at)
        inner = at.clip(self.value.shape[1], self.value.shape[0])
        if inner.width and inner.height:
            sy, sx = inner.y0 - at.y0, inner.x0 - at.x0
            d = (slice(inner.y0, inner.y1), slice(inner.x0, inner.x1))
            self.plain[d] += tile[sy:sy + inner.height, sx:sx + inner.width]
            self.count[d] += 1

    def result(self) -> np.ndarray:
        """F per pixel; falls back to the unweighted mean where no weight landed.

        Consumes the accumulator (the division happens in place).
        """
        if not self.count.all():
            raise TilingError("some pixels were not covered by any tile")
        covered = self.weight > 0
        np.divide(self.value, self.weight, out=self.value, where=covered)
        np.logical_not(covered, out=covered)
        if covered.any():
            self.value[covered] = self.plain[covered] / self.count[covered]
        np.clip(self.value, 0.0, 1.0, out=self.value)
        return self.value.astype(np.float32)


def _check_tile(tile, patch):
    tile = as_probmap(tile)
    if tile.shape != (patch, patch):
        raise TilingError(f"tile is {tile.shape[1]}x{tile.shape[0]}, expected {patch}x{patch}")
    return tile


def _normalise_groups(groups, plan: ShiftGroupPlan):
    if isinstance(groups, Mapping):
        keyed = {tuple(s): v for s, v in groups.items()}
        if set(keyed) != set(plan.shifts):
            raise TilingError(f"groups {sorted(keyed)} do not match plan shifts {sorted(plan.shifts)}")
        return [keyed[s] for s in plan.shifts]
    groups = list(groups)
    if len(groups) != len(plan.shifts):
        raise TilingError(f"expected {len(plan.shifts)} groups, got {len(groups)}")
    return groups


def assemble(groups, plan: ShiftGroupPlan, weights=None) -> np.ndarray:
    """Merge per-group tile predictions into one prob map.

    ``groups`` is either a mapping ``shift -> [(origin, tile), ...]`` or a
    sequence aligned with ``plan.shifts``. An origin is ``(x, y)`` or a
    :class:`Region`. Every group must supply exactly the tiles of its grid.
    """
    w = weight_map(plan.patch) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (plan.patch, plan.patch):
        raise TilingError("weight map does not match the patch size")
    per_group = _normalise_groups(groups, plan)
    acc = Accumulator(plan.image_w, plan.image_h)
    for k in plan.canonical_order():
        tiles = {}
        for origin, tile in per_group[k]:
            xy = (origin.x0, origin.y0) if isinstance(origin, Region) else tuple(origin)
            if xy in tiles:
                raise TilingError(f"group {plan.shifts[k]} has two tiles at {xy}")
            tiles[xy] = _check_tile(tile, plan.patch)
        want = set(plan.origins(k))
        if set(tiles) != want:
            missing = sorted(want - set(tiles))[:3]
            raise TilingError(f"group {plan.shifts[k]} fails coverage (missing e.g. {missing})")
        for (x, y), tile in sorted(tiles.items()):
            acc.add(tile, x, y, w)
    return acc.result()


class MemoryAccountant:
    """Tracks bytes of working buffers a stage declares, and the peak."""

    def __init__(self, budget=None):
        self.budget = budget
        self.current = 0
        self.peak = 0

    def alloc(self, nbytes: int) -> None:
        self.current += int(nbytes)
        self.peak = max(self.peak, self.current)

    def free(self, nbytes: int) -> None:
        self.current -= int(nbytes)

    @property
    def within_budget(self) -> bool:
        return self.budget is None or self.peak <= self.budget


# Working set per tile in flight: RGB crop, predictor scratch (labels,
# float64 noise, float32 output) and the float64 weighted product.
TILE_WORK_BYTES_PER_PIXEL = 3 + 1 + 8 + 4 + 4 + 8


def stripe_rows_for_budget(plan: ShiftGroupPlan, budget, inflight: int) -> int:
    """Largest stripe height (a multiple of the patch) fitting ``budget`` bytes."""
    p = plan.patch
    full = -(-plan.image_h // p) * p
    if budget is None:
        return full
    fixed = fixed_stage_bytes(plan, inflight)
    per_row = plan.image_w * Accumulator.BYTES_PER_PIXEL
    rows = (budget - fixed) // per_row // p * p
    if rows < p:
        need = fixed + p * per_row
        raise TilingError(f"memory budget {budget} B is below the {need} B one patch-high stripe needs")
    return int(min(rows, full))


def fixed_stage_bytes(plan: ShiftGroupPlan, inflight: int) -> int:
    """Bytes held independently of stripe height: carried tiles, tiles in flight, weights."""
    p = plan.patch
    tile_bytes = p * p * 4
    carry = sum(plan.grid(k)[1] for k in range(len(plan.shifts)) if plan.shifts[k][1]) * tile_bytes
    return carry + inflight * p * p * TILE_WORK_BYTES_PER_PIXEL + p * p * 8


def assemble_streaming(plan: ShiftGroupPlan, tile_fn: Callable[[int, int, int], np.ndarray],
                       sink: Callable[[np.ndarray], None], weights=None, stripe_rows=None,
                       workers: int = 1, inflight=None, accountant=None, batch_fn=None) -> None:
    """Predict-and-assemble in horizontal stripes without materialising the image.

    ``tile_fn(k, x, y)`` returns the patch x patch prediction for the tile of
    group ``k`` whose origin is ``(x, y)``; it must be pure. Finished stripes
    are handed to ``sink`` top to bottom. Tiles straddling a stripe boundary
    are carried over rather than predicted twice. Output is bit-identical
    for any ``stripe_rows`` and ``workers``. ``batch_fn(jobs)``, if given,
    replaces per-tile calls with one call per block of ``inflight`` tiles.
    """
    p = plan.patch
    w = weight_map(p) if weights is None else np.asarray(weights, dtype=np.float64)
    inflight = inflight or max(2 * workers, 1)
    stripe = stripe_rows or -(-plan.image_h // p) * p
    if stripe % p:
        raise TilingError("stripe height must be a multiple of the patch")
    acct = accountant or MemoryAccountant()
    tile_bytes = p * p * 4
    acct.alloc(w.nbytes)
    carry: dict = {}
    pool = ThreadPoolExecutor(workers) if workers > 1 else None

    def fetch(jobs):
        acct.alloc(len(jobs) * p * p * TILE_WORK_BYTES_PER_PIXEL)
        try:
            if batch_fn is not None:
                out = list(batch_fn(jobs)) if jobs else []
            elif pool is None:
                out = [tile_fn(*j) for j in jobs]
            else:
                out = list(pool.map(lambda j: tile_fn(*j), jobs))
            return [_check_tile(t, p) for t in out]
        finally:
            acct.free(len(jobs) * p * p * TILE_WORK_BYTES_PER_PIXEL)

    try:
        for ys in range(0, plan.image_h, stripe):
            ye = min(ys + stripe, plan.image_h)
            acc = Accumulator(plan.image_w, ye - ys, ys)
            acct.alloc(acc.nbytes)
            for k in plan.canonical_order():
                cols = plan.grid(k)[1]
                for r in plan.rows_touching(k, ys, ye):
                    for c0 in range(0, cols, inflight):
                        cs = range(c0, min(c0 + inflight, cols))
                        fresh = [c for c in cs if (k, r, c) not in carry]
                        got = dict(zip(fresh, fetch([(k, *plan.origin(k, r, c)) for c in fresh])))
                        for c in cs:
                            x, y = plan.origin(k, r, c)
                            if c in got:
                                tile = got[c]
                            else:
                                tile = carry.pop((k, r, c))
                                acct.free(tile_bytes)
                            acc.add(tile, x, y, w)
                            if y + p > ye and ye < plan.image_h:
                                carry[(k, r, c)] = tile
                                acct.alloc(tile_bytes)
            res = acc.result()  # output bytes are part of acc.nbytes
            sink(res)
            acct.free(acc.nbytes)
            del acc, res
    finally:
        if pool is not None:
            pool.shutdown()
        acct.free(w.nbytes)

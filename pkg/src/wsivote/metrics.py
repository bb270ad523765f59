"""Pixel F1, Jaccard, directed Hausdorff distance and (Th, N) sweeps.

Masks are boolean arrays of equal shape; F1 and Jaccard score the tumour
class as a binary problem. Hausdorff is directed prediction -> ground truth.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .fusion import VoteConfig, upsample_to
from .raster import RasterError

HAUSDORFF_DIRECTION = "prediction->ground_truth"


class UndefinedDistanceError(ValueError):
    pass


@dataclass(frozen=True)
class Counts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, gt) -> Counts:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise RasterError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred)) - tp
    fn = int(np.count_nonzero(gt)) - tp
    return Counts(tp, fp, fn, pred.size - tp - fp - fn)


def f1(c: Counts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def jaccard(c: Counts) -> float:
    denom = c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def _bbox(m):
    rows, cols = np.any(m, axis=1), np.any(m, axis=0)
    r = np.flatnonzero(rows)
    c = np.flatnonzero(cols)
    return r[0], r[-1] + 1, c[0], c[-1] + 1


def directed_hausdorff(a, b) -> float:
    """max over foreground pixels of ``a`` of the distance to the nearest foreground pixel of ``b``.

    Exact: a Euclidean distance transform of ``b`` restricted to the joint
    bounding box, so the cost is linear in the box area.
    """
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    if a.shape != b.shape:
        raise RasterError(f"masks differ in shape: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise UndefinedDistanceError("undefined distance: empty mask")
    y0, y1, x0, x1 = _bbox(a | b)
    sa, sb = a[y0:y1, x0:x1], b[y0:y1, x0:x1]
    dist = ndimage.distance_transform_edt(~sb)
    return float(dist[sa].max())


@dataclass
class EvalReport:
    f1: float
    jaccard: float
    hausdorff_directed: Optional[float]
    tp: int
    fp: int
    fn: int
    tn: int
    hausdorff_direction: str = HAUSDORFF_DIRECTION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def evaluate(pred, gt) -> EvalReport:
    c = confusion(pred, gt)
    try:
        hd = directed_hausdorff(pred, gt)
    except UndefinedDistanceError:
        hd = None
    return EvalReport(f1(c), jaccard(c), hd, c.tp, c.fp, c.fn, c.tn)


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)        # (th, n, f1, jaccard, hausdorff|None)
    level_best: list = field(default_factory=list)  # (level, best_f1, th_f1, best_jaccard, th_jaccard)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["th", "n", "f1", "jaccard", "hausdorff"])
        for th, n, f, j, hd in self.rows:
            w.writerow([f"{th:g}", n, f"{f:.6f}", f"{j:.6f}", "nan" if hd is None else f"{hd:.6f}"])
        return buf.getvalue()

    def level_best_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "best_f1", "th_f1", "best_jaccard", "th_jaccard"])
        for level, bf, tf, bj, tj in self.level_best:
            w.writerow([level, f"{bf:.6f}", f"{tf:g}", f"{bj:.6f}", f"{tj:g}"])
        return buf.getvalue()

    def best(self, metric="jaccard"):
        """(th, n, score) of the best cell; ties keep the first in grid order."""
        col = {"f1": 2, "jaccard": 3}[metric]
        top = max(self.rows, key=lambda r: r[col])
        return top[0], top[1], top[col]


def sweep(pred_levels: dict, gt, th_grid, n_grid, weights=None, upsampler="nearest") -> SweepResult:
    """Evaluate the vote over every (Th, N) cell plus each level's best threshold.

    Maps may be at their native level size or already at level-0 size.
    Cells with N above the available votes are skipped.
    """
    th_grid, n_grid = list(th_grid), list(n_grid)
    if not th_grid or not n_grid:
        raise ValueError("sweep grids must be non-empty")
    gt = np.asarray(gt, bool)
    h0, w0 = gt.shape
    weights = {n: 1 for n in pred_levels} if weights is None else {int(k): int(v) for k, v in weights.items()}
    VoteConfig(0.5, 1, weights)
    ups = {}
    for n in sorted(pred_levels):
        m = np.asarray(pred_levels[n], np.float32)
        ups[n] = m if m.shape == gt.shape else upsample_to(m, n, w0, h0, upsampler)
    dist = ndimage.distance_transform_edt(~gt) if gt.any() else None
    total = sum(weights[n] for n in ups)
    res = SweepResult()

    def score(mask):
        c = confusion(mask, gt)
        hd = float(dist[mask].max()) if dist is not None and mask.any() else None
        return f1(c), jaccard(c), hd

    per_level = {n: [] for n in ups}
    for th in th_grid:
        th32 = np.float32(th)
        tally = np.zeros(gt.shape, np.int32)
        for n, m in ups.items():
            b = m >= th32
            tally += weights[n] * b
            f, j, _ = score(b)
            per_level[n].append((th, f, j))
        for nv in n_grid:
            if nv > total:
                continue
            res.rows.append((th, nv, *score(tally >= nv)))
    for n, rows in per_level.items():
        bf = max(rows, key=lambda r: r[1])
        bj = max(rows, key=lambda r: r[2])
        res.level_best.append((n, bf[1], bf[0], bj[2], bj[0]))
    return res


def plot_sweep(result: SweepResult, path, metric="jaccard") -> None:
    """Score-vs-Th curves, one per N, written as SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    col = {"f1": 2, "jaccard": 3}[metric]
    fig, ax = plt.subplots(figsize=(5, 4))
    for nv in sorted({r[1] for r in result.rows}):
        pts = [(r[0], r[col]) for r in result.rows if r[1] == nv]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"N={nv}")
    ax.set_xlabel("Th")
    ax.set_ylabel(metric)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


"""Tile -> tumour probability predictors.

Trained per-level networks are out of reach here, so prediction goes
through one narrow interface, :func:`predict`, with three deterministic
built-ins (``constant``, ``oracle``, ``stain-heuristic``) and a file-based
bridge to an external model process (``external``).

External protocol: for each request the predictor writes ``tile.png`` and
``tile.json`` (``{"level": n, "x": x0, "y": y0, "patch": p}``) into a fresh
directory and runs the configured command with that directory as its sole
argument. Exit status 0 means ``tile.pmap`` (PMAP format) is in place.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from . import colorspace
from .io import PmapFormatError, decode_pmap, write_image
from .pyramid import expand_to, pyr_down, resize_bilinear
from .raster import TUMOR, Region, as_labels, crop

KINDS = ("constant", "oracle", "stain-heuristic", "external")


class PredictorError(RuntimeError):
    def __init__(self, msg, level=None, origin=None):
        where = "" if level is None else f" [level {level}, tile at {origin}]"
        super().__init__(msg + where)
        self.level, self.origin = level, origin


class ExternalExitError(PredictorError):
    pass


class ExternalTimeoutError(PredictorError):
    pass


class MalformedResponseError(PredictorError):
    pass


class ResponseDimensionError(PredictorError):
    pass


class ResponseRangeError(PredictorError):
    pass


@dataclass(frozen=True)
class TileRequest:
    level: int
    tile: np.ndarray
    origin: Region
    level_size: Optional[tuple] = None

    def __post_init__(self):
        t = self.tile
        if t.dtype != np.uint8 or t.ndim != 3 or t.shape[2] != 3 or t.shape[0] != t.shape[1]:
            raise PredictorError(f"tile must be square uint8 RGB, got {t.shape} {t.dtype}",
                                 self.level, (self.origin.x0, self.origin.y0))

    @property
    def patch(self) -> int:
        return self.tile.shape[0]

    @property
    def where(self):
        return (self.origin.x0, self.origin.y0)


@dataclass
class PredictorSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown predictor kind {self.kind!r}; expected one of {KINDS}")
        need = {"constant": ("p",), "oracle": ("gt",), "stain-heuristic": ("axis", "threshold", "softness"),
                "external": ("command",)}[self.kind]
        missing = [k for k in need if k not in self.params]
        if missing:
            raise ValueError(f"{self.kind} predictor is missing parameters {missing}")


def constant_predictor(p: float) -> PredictorSpec:
    if not 0.0 <= p <= 1.0:
        raise ValueError("constant probability must lie in [0, 1]")
    return PredictorSpec("constant", {"p": float(p)})


def oracle_predictor(gt, blur_levels: int = 0, noise_sigma: float = 0.0, seed: int = 0) -> PredictorSpec:
    """Test double reading the TUMOR indicator of ``gt`` (labels at the tile's level)."""
    return PredictorSpec("oracle", {"gt": gt, "blur_levels": int(blur_levels),
                                    "noise_sigma": float(noise_sigma), "seed": int(seed)})


# Reference H&E colours; only used to derive a default projection axis.
HEMATOXYLIN_RGB = (70, 40, 125)
EOSIN_RGB = (235, 150, 200)


def _lab(rgb):
    l, a, b = colorspace.rgb_to_lab(np.array([[rgb]], np.uint8))
    return np.array([l[0, 0], a[0, 0], b[0, 0]])


def stain_heuristic_predictor(hematoxylin_axis=None, threshold=None, softness=None) -> PredictorSpec:
    """Logistic score of the lαβ projection onto a hematoxylin direction.

    Defaults put the axis from the eosin to the hematoxylin reference
    colour, the threshold at their midpoint and the softness at an eighth
    of their separation.
    """
    h, e = _lab(HEMATOXYLIN_RGB), _lab(EOSIN_RGB)
    sep = np.linalg.norm(h - e)
    axis = (h - e) / sep if hematoxylin_axis is None else np.asarray(hematoxylin_axis, float)
    axis = axis / np.linalg.norm(axis)
    if threshold is None:
        threshold = float(axis @ ((h + e) / 2))
    if softness is None:
        softness = float(sep / 8)
    if softness <= 0:
        raise ValueError("softness must be positive")
    return PredictorSpec("stain-heuristic", {"axis": axis.tolist(), "threshold": float(threshold),
                                             "softness": float(softness)})


def external_predictor(command, timeout: float = 60.0, batch: bool = False) -> PredictorSpec:
    if isinstance(command, str):
        command = shlex.split(command)
    return PredictorSpec("external", {"command": list(command), "timeout": float(timeout),
                                      "batch": bool(batch)})


def _noise_rng(seed: int, level: int, origin: Region):
    # Keyed per tile, so any evaluation order draws the same numbers.
    off = 1 << 40
    return np.random.default_rng([int(seed), int(level), origin.x0 + off, origin.y0 + off])


def _oracle(params, req: TileRequest) -> np.ndarray:
    gt = params["gt"]
    if req.level_size is not None and tuple(req.level_size) != (gt.shape[1], gt.shape[0]):
        raise PredictorError(f"ground truth {gt.shape[1]}x{gt.shape[0]} does not match level size "
                             f"{req.level_size[0]}x{req.level_size[1]}", req.level, req.where)
    region = req.origin
    ind = (crop(gt, region, 0) == TUMOR).astype(np.float32)
    if ind.shape != (req.patch, req.patch):
        ind = np.clip(resize_bilinear(ind, req.patch, req.patch), 0.0, 1.0)
    for _ in range(int(params.get("blur_levels", 0))):
        h, w = ind.shape
        ind = expand_to(pyr_down(ind), w, h)
    sigma = float(params.get("noise_sigma", 0.0))
    if sigma > 0:
        rng = _noise_rng(params.get("seed", 0), req.level, region)
        ind = ind + rng.normal(0.0, sigma, ind.shape).astype(np.float32)
    return np.clip(ind, 0.0, 1.0).astype(np.float32)


def _stain(params, req: TileRequest) -> np.ndarray:
    l, a, b = colorspace.rgb_to_lab(req.tile)
    axis = np.asarray(params["axis"], float)
    proj = l * axis[0] + a * axis[1] + b * axis[2]
    z = (proj - float(params["threshold"])) / float(params["softness"])
    return expit(z).astype(np.float32)


def _write_request(d: Path, req: TileRequest) -> None:
    d.mkdir(parents=True, exist_ok=True)
    write_image(d / "tile.png", req.tile)
    (d / "tile.json").write_text(json.dumps(
        {"level": req.level, "x": req.origin.x0, "y": req.origin.y0, "patch": req.patch}))


def _read_response(d: Path, req: TileRequest) -> np.ndarray:
    path = d / "tile.pmap"
    if not path.exists():
        raise MalformedResponseError("external predictor produced no tile.pmap", req.level, req.where)
    try:
        m = decode_pmap(path.read_bytes())
    except PmapFormatError as e:
        raise MalformedResponseError(f"malformed PMAP: {e}", req.level, req.where) from e
    if m.shape != (req.patch, req.patch):
        raise ResponseDimensionError(f"response is {m.shape[1]}x{m.shape[0]}, expected "
                                     f"{req.patch}x{req.patch}", req.level, req.where)
    if not np.all((m >= 0) & (m <= 1)):
        raise ResponseRangeError("response values outside [0, 1]", req.level, req.where)
    return m


def _run(params, target: Path, req: TileRequest):
    cmd = list(params["command"]) + [str(target)]
    try:
        proc = subprocess.run(cmd, capture_output=True, timeout=float(params.get("timeout", 60.0)))
    except subprocess.TimeoutExpired as e:
        raise ExternalTimeoutError(f"external predictor timed out after {e.timeout}s",
                                   req.level, req.where) from e
    except OSError as e:
        raise ExternalExitError(f"cannot launch external predictor: {e}", req.level, req.where) from e
    if proc.returncode != 0:
        err = proc.stderr.decode(errors="replace").strip()[-500:]
        raise ExternalExitError(f"external predictor exited with {proc.returncode}: {err}",
                                req.level, req.where)


def external_predict(params, req: TileRequest) -> np.ndarray:
    with tempfile.TemporaryDirectory(prefix="wsivote-tile-") as tmp:
        d = Path(tmp)
        _write_request(d, req)
        _run(params, d, req)
        return _read_response(d, req)


def external_predict_batch(params, reqs) -> list:
    """Batch directory mode: one invocation over ``<root>/<index>/tile.*`` request dirs."""
    reqs = list(reqs)
    if not reqs:
        return []
    with tempfile.TemporaryDirectory(prefix="wsivote-batch-") as tmp:
        root = Path(tmp)
        for i, req in enumerate(reqs):
            _write_request(root / f"{i:06d}", req)
        _run(params, root, reqs[0])
        return [_read_response(root / f"{i:06d}", req) for i, req in enumerate(reqs)]


def predict(spec: PredictorSpec, req: TileRequest) -> np.ndarray:
    """Run ``spec`` on one tile; the result is always a validated patch x patch prob map."""
    if spec.kind == "constant":
        out = np.full((req.patch, req.patch), spec.params["p"], np.float32)
    elif spec.kind == "oracle":
        out = _oracle(spec.params, req)
    elif spec.kind == "stain-heuristic":
        out = _stain(spec.params, req)
    else:
        out = external_predict(spec.params, req)
    out = np.asarray(out, dtype=np.float32)
    if out.shape != (req.patch, req.patch):
        raise ResponseDimensionError(f"predictor returned shape {out.shape}", req.level, req.where)
    if not np.all((out >= 0) & (out <= 1)):
        raise ResponseRangeError("predictor returned values outside [0, 1]", req.level, req.where)
    return out


def predict_many(spec: PredictorSpec, reqs) -> list:
    """Predict a list of tiles; batch-mode external predictors get one invocation."""
    reqs = list(reqs)
    if spec.kind == "external" and spec.params.get("batch"):
        return external_predict_batch(spec.params, reqs)
    return [predict(spec, r) for r in reqs]


def spec_from_dict(d: dict, gt_loader=None) -> PredictorSpec:
    """Build a spec from its JSON form; ``gt_loader(path)`` resolves an oracle ``gt`` path."""
    kind, params = d["kind"], dict(d.get("params", {}))
    if kind == "stain-heuristic":
        return stain_heuristic_predictor(params.get("axis"), params.get("threshold"),
                                         params.get("softness"))
    if kind == "external":
        return external_predictor(params["command"], params.get("timeout", 60.0),
                                  params.get("batch", False))
    if kind == "oracle" and isinstance(params.get("gt"), (str, Path)):
        if gt_loader is None:
            raise ValueError("oracle gt given as a path but no loader supplied")
        params["gt"] = as_labels(gt_loader(params["gt"]))
    return PredictorSpec(kind, params)

"""End-to-end run: normalise -> pyramid -> tiled prediction per level -> vote -> evaluate.

Every stage persists its artifacts under the output directory and records
their sha256 in ``manifest.json``, rewritten after each stage so an
interrupted run can be resumed. A stage is skipped on resume when its
recorded inputs match and its artifacts are present and intact; a present
artifact with the wrong hash is a hard error.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .colorspace import BackgroundThreshold, ColorStats, image_stats, partial_normalize
from .fusion import UPSAMPLERS, VoteConfig, fuse
from .io import (PmapWriter, file_sha256, read_image, read_labels, read_mask, read_pmap,
                 write_image, write_mask)
from .metrics import evaluate
from .predictor import PredictorSpec, TileRequest, predict, predict_many, spec_from_dict
from .pyramid import DEFAULT_LEVELS, MAX_LEVEL, level_shape, pyr_down, resize_bilinear
from .raster import NORMAL, TUMOR, Region, crop
from .tiling import (ShiftGroupPlan, assemble_streaming, make_plan,
                     stripe_rows_for_budget)

log = logging.getLogger(__name__)

PAD_WHITE = 255
MANIFEST = "manifest.json"
BATCH_TILES = 16
# Fields that change how a run executes but never what it produces.
EXECUTION_ONLY = ("workers", "output_dir", "memory_budget_mb")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage, self.cause = stage, cause


class ManifestMismatchError(RuntimeError):
    pass


class IntegrityError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    input: str
    output_dir: str
    ground_truth: Optional[str] = None
    levels: tuple = DEFAULT_LEVELS
    patch: int = 448
    shifts: Optional[list] = None
    target_stats: Optional[ColorStats] = None
    target_image: Optional[str] = None
    background_threshold: BackgroundThreshold = field(default_factory=BackgroundThreshold)
    predictors: dict = field(default_factory=dict)
    use_normalized: dict = field(default_factory=dict)
    resize_levels: tuple = (7,)
    vote: VoteConfig = field(default_factory=VoteConfig)
    upsampler: str = "nearest"
    workers: int = 1
    seed: int = 0
    memory_budget_mb: Optional[float] = None

    def __post_init__(self):
        self.levels = tuple(sorted({int(n) for n in self.levels}))
        self.resize_levels = tuple(sorted({int(n) for n in self.resize_levels}))
        self.predictors = {str(k): v for k, v in self.predictors.items()}
        self.use_normalized = {int(k): bool(v) for k, v in self.use_normalized.items()}
        self.validate()

    def validate(self):
        if self.patch < 2 or self.patch % 2:
            raise ConfigError(f"patch must be even and >= 2, got {self.patch}")
        if not self.levels or any(not 0 <= n <= MAX_LEVEL for n in self.levels):
            raise ConfigError(f"levels must be a non-empty subset of 0..{MAX_LEVEL}")
        for n in self.levels:
            if str(n) not in self.predictors and "default" not in self.predictors:
                raise ConfigError(f"level {n} has no predictor spec")
            if n not in self.vote.level_weights:
                raise ConfigError(f"level {n} has no vote weight")
        if self.vote.min_votes_n > self.vote.total_votes(self.levels):
            raise ConfigError("min_votes exceeds the votes of the configured levels")
        if self.upsampler not in UPSAMPLERS:
            raise ConfigError(f"upsampler must be one of {UPSAMPLERS}")
        if self.target_stats is not None and self.target_image is not None:
            raise ConfigError("give target_stats or target_image, not both")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def predictor_dict(self, level: int) -> dict:
        return self.predictors.get(str(level), self.predictors.get("default"))

    def normalized_for(self, level: int) -> bool:
        return self.use_normalized.get(level, True)

    @property
    def normalizes(self) -> bool:
        return self.target_stats is not None or self.target_image is not None

    @property
    def memory_budget(self):
        return None if self.memory_budget_mb is None else int(self.memory_budget_mb * 2**20)

    def to_dict(self) -> dict:
        return {
            "input": self.input, "output_dir": self.output_dir, "ground_truth": self.ground_truth,
            "levels": list(self.levels), "patch": self.patch,
            "shifts": None if self.shifts is None else [list(s) for s in self.shifts],
            "target_stats": None if self.target_stats is None else json.loads(self.target_stats.to_json()),
            "target_image": self.target_image,
            "background_threshold": list(self.background_threshold.as_tuple()),
            "predictors": self.predictors,
            "use_normalized": {str(k): v for k, v in sorted(self.use_normalized.items())},
            "resize_levels": list(self.resize_levels), "vote": self.vote.to_dict(),
            "upsampler": self.upsampler, "workers": self.workers, "seed": self.seed,
            "memory_budget_mb": self.memory_budget_mb,
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "PipelineConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")

        def path(key):
            v = d.get(key)
            if v is None or base_dir is None or os.path.isabs(v):
                return v
            return str(Path(base_dir) / v)

        for key in ("input", "output_dir"):
            if key not in d:
                raise ConfigError(f"config needs {key!r}")
        try:
            ts = d.get("target_stats")
            return cls(
                input=path("input"), output_dir=path("output_dir"),
                ground_truth=path("ground_truth"),
                levels=tuple(d.get("levels", DEFAULT_LEVELS)), patch=int(d.get("patch", 448)),
                shifts=d.get("shifts"),
                target_stats=None if ts is None else ColorStats.from_dict(ts),
                target_image=path("target_image"),
                background_threshold=BackgroundThreshold(*d.get("background_threshold", (235, 210, 235))),
                predictors=_resolve_predictor_paths(d.get("predictors", {}), base_dir),
                use_normalized=d.get("use_normalized", {}),
                resize_levels=tuple(d.get("resize_levels", (7,))),
                vote=VoteConfig.from_dict(d.get("vote", {})),
                upsampler=d.get("upsampler", "nearest"), workers=int(d.get("workers", 1)),
                seed=int(d.get("seed", 0)), memory_budget_mb=d.get("memory_budget_mb"),
            )
        except (TypeError, KeyError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path, overrides=None) -> "PipelineConfig":
        d = json.loads(Path(path).read_text())
        d.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(d, base_dir=Path(path).parent)


def _resolve_predictor_paths(preds, base_dir):
    if base_dir is None:
        return dict(preds)
    out = {}
    for k, spec in preds.items():
        spec = json.loads(json.dumps(spec))
        gt = spec.get("params", {}).get("gt")
        if isinstance(gt, str) and not os.path.isabs(gt):
            spec["params"]["gt"] = str(Path(base_dir) / gt)
        out[k] = spec
    return out


def _canonical(d) -> str:
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def config_fingerprint(cfg: PipelineConfig) -> str:
    d = {k: v for k, v in cfg.to_dict().items() if k not in EXECUTION_ONLY}
    return hashlib.sha256(_canonical(d).encode()).hexdigest()


def load_raster(path) -> np.ndarray:
    """PNG/TIFF, or ``.npy`` (memory-mapped, for rasters too big to decode)."""
    if str(path).endswith(".npy"):
        a = np.load(path, mmap_mode="r")
    else:
        a = read_image(path)
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    return a


def load_ground_truth(path) -> np.ndarray:
    """Label mask; a plain binary mask is read as TUMOR vs NORMAL."""
    if str(path).endswith(".npy"):
        return np.load(path, mmap_mode="r")
    try:
        return read_labels(path)
    except ValueError:
        return np.where(read_mask(path), TUMOR, NORMAL).astype(np.uint8)


def level_labels(gt: np.ndarray, level: int) -> np.ndarray:
    """Ground truth at a pyramid level by even-index decimation (matches the ceil size law)."""
    if level == 0:
        return gt
    s = 1 << level
    return np.ascontiguousarray(gt[::s, ::s])


def predict_level(image, level: int, spec: PredictorSpec, plan: ShiftGroupPlan, sink,
                  workers: int = 1, budget=None, accountant=None, resize: bool = False) -> None:
    """Predict one pyramid level and stream the assembled prob map into ``sink``.

    With ``resize`` the whole level is resized to one patch, predicted once
    and resized back (used for the coarsest level).
    """
    h, w = image.shape[:2]
    p = plan.patch
    if resize:
        tile = resize_bilinear(np.asarray(image), p, p)
        req = TileRequest(level, tile, Region(0, 0, w, h), (w, h))
        out = resize_bilinear(predict(spec, req), w, h)
        sink(np.clip(out, 0.0, 1.0).astype(np.float32))
        return

    def request(x, y):
        region = Region(x, y, p, p)
        return TileRequest(level, crop(image, region, PAD_WHITE), region, (w, h))

    def tile_fn(k, x, y):
        return predict(spec, request(x, y))

    def many(jobs):
        return predict_many(spec, [request(x, y) for _, x, y in jobs])

    batch_fn = many if spec.kind == "external" and spec.params.get("batch") else None

    # a batch invocation pays process start-up once per block, so blocks are larger
    inflight = max(2 * workers, BATCH_TILES if batch_fn else 1)
    stripe = stripe_rows_for_budget(plan, budget, inflight)
    assemble_streaming(plan, tile_fn, sink, stripe_rows=stripe, workers=workers,
                       inflight=inflight, accountant=accountant, batch_fn=batch_fn)


@dataclass
class RunManifest:
    path: Path
    data: dict
    executed: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def out_dir(self) -> Path:
        return self.path.parent

    def artifact_hashes(self) -> dict:
        return {rel: sha for st in self.data["stages"].values() for rel, sha in st["artifacts"].items()}

    def verify(self) -> None:
        for rel, sha in self.artifact_hashes().items():
            p = self.out_dir / rel
            if not p.exists():
                raise IntegrityError(f"artifact {rel} is missing")
            if file_sha256(p) != sha:
                raise IntegrityError(f"artifact {rel} does not match its recorded hash")

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        return cls(path, json.loads(path.read_text()))


class _Run:
    def __init__(self, cfg: PipelineConfig, previous: Optional[dict] = None):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.prev = (previous or {}).get("stages", {})
        self.stages: dict = {}
        self.executed, self.skipped = [], []
        self.inputs = {"input": file_sha256(cfg.input)}
        if cfg.ground_truth:
            self.inputs["ground_truth"] = file_sha256(cfg.ground_truth)
        if cfg.target_image:
            self.inputs["target_image"] = file_sha256(cfg.target_image)
        self.doc = {
            "tool": "wsivote", "version": __version__,
            "config": cfg.to_dict(), "config_fingerprint": config_fingerprint(cfg),
            "inputs": self.inputs, "stages": self.stages, "complete": False,
        }
        self._cache: dict = {}

    def write_manifest(self, complete=False):
        self.doc["complete"] = complete
        tmp = self.out / (MANIFEST + ".tmp")
        tmp.write_text(json.dumps(self.doc, indent=2, sort_keys=True))
        os.replace(tmp, self.out / MANIFEST)

    def stage(self, name: str, inputs: dict, produce):
        prev = self.prev.get(name)
        if prev is not None and prev.get("inputs") == inputs:
            intact = True
            for rel, sha in prev["artifacts"].items():
                p = self.out / rel
                if not p.exists():
                    intact = False
                    continue
                if file_sha256(p) != sha:
                    raise IntegrityError(f"artifact {rel} of stage {name!r} does not match its recorded hash")
            if intact:
                self.stages[name] = prev
                self.skipped.append(name)
                return prev["artifacts"]
        t0 = time.perf_counter()
        log.info("stage %s", name)
        try:
            artifacts = produce()
        except (IntegrityError, ManifestMismatchError):
            raise
        except Exception as e:
            self.write_manifest()
            raise StageError(name, e) from e
        self.stages[name] = {"inputs": inputs, "artifacts": artifacts,
                             "seconds": round(time.perf_counter() - t0, 3)}
        self.executed.append(name)
        self.write_manifest()
        return artifacts

    def artifact(self, rel):
        return self.out / rel

    # -- cached loaders -------------------------------------------------
    def raw(self):
        if "raw" not in self._cache:
            self._cache["raw"] = load_raster(self.cfg.input)
        return self._cache["raw"]

    def gt(self):
        if "gt" not in self._cache:
            self._cache["gt"] = load_ground_truth(self.cfg.ground_truth)
        return self._cache["gt"]


def _hash_map(paths: dict) -> dict:
    return {rel: file_sha256(p) for rel, p in paths.items()}


def _execute(cfg: PipelineConfig, previous=None) -> RunManifest:
    r = _Run(cfg, previous)
    out = r.out
    needs_norm = cfg.normalizes and any(cfg.normalized_for(n) for n in cfg.levels)

    # -- normalize ------------------------------------------------------
    norm_rel = "normalized.png"
    if needs_norm:
        def do_normalize():
            src = r.raw()
            if cfg.target_stats is not None:
                target = cfg.target_stats
            else:
                target = image_stats(load_raster(cfg.target_image), cfg.background_threshold,
                                     block_rows=4096)
            img = partial_normalize(src, target, cfg.background_threshold, block_rows=4096)
            write_image(out / norm_rel, img)
            (out / "target_stats.json").write_text(target.to_json())
            return _hash_map({norm_rel: out / norm_rel, "target_stats.json": out / "target_stats.json"})

        norm_inputs = {"input": r.inputs["input"], "target_image": r.inputs.get("target_image"),
                       "target_stats": cfg.to_dict()["target_stats"],
                       "threshold": list(cfg.background_threshold.as_tuple())}
        r.stage("normalize", norm_inputs, do_normalize)

    # -- pyramid --------------------------------------------------------
    def pyramid_stage(kind, source_hash, source_loader, wanted):
        deepest = max(wanted, default=0)
        rels = {n: f"levels/{kind}_level_{n}.png" for n in wanted if n > 0}
        if not rels:
            return {}

        def build():
            (out / "levels").mkdir(exist_ok=True)
            cur = source_loader()
            for n in range(1, deepest + 1):
                cur = pyr_down(cur)
                if n in rels:
                    write_image(out / rels[n], cur)
            return _hash_map({rel: out / rel for rel in rels.values()})

        r.stage(f"pyramid_{kind}", {"source": source_hash, "levels": sorted(rels)}, build)
        return rels

    level_src: dict = {}
    if needs_norm:
        norm_levels = [n for n in cfg.levels if cfg.normalized_for(n)]
        rels = pyramid_stage("normalized", r.stages["normalize"]["artifacts"][norm_rel],
                             lambda: read_image(out / norm_rel), norm_levels)
        for n in norm_levels:
            level_src[n] = norm_rel if n == 0 else rels[n]
    raw_levels = [n for n in cfg.levels if not (needs_norm and cfg.normalized_for(n))]
    if raw_levels:
        rels = pyramid_stage("raw", r.inputs["input"], r.raw, raw_levels)
        for n in raw_levels:
            level_src[n] = None if n == 0 else rels[n]

    def level_image(n):
        rel = level_src[n]
        return r.raw() if rel is None else load_raster(out / rel)

    def level_hash(n):
        rel = level_src[n]
        if rel is None:
            return r.inputs["input"]
        for st in r.stages.values():
            if rel in st["artifacts"]:
                return st["artifacts"][rel]
        raise IntegrityError(f"no stage produced {rel}")

    # -- per-level predict + assemble -----------------------------------
    w0, h0 = r.raw().shape[1], r.raw().shape[0]
    prob_rels = {}
    for n in cfg.levels:
        rel = f"prob/level_{n}.pmap"
        prob_rels[n] = rel
        spec_d = cfg.predictor_dict(n)

        def do_predict(n=n, rel=rel, spec_d=spec_d):
            (out / "prob").mkdir(exist_ok=True)
            spec = _build_spec(spec_d, cfg, r, n)
            img = level_image(n)
            h, w = img.shape[:2]
            if (w, h) != level_shape(w0, h0, n):
                raise IntegrityError(f"level {n} image has unexpected size {w}x{h}")
            plan = make_plan(w, h, cfg.patch, cfg.shifts)
            with PmapWriter(out / rel, w, h) as writer:
                predict_level(img, n, spec, plan, writer.write, workers=cfg.workers,
                              budget=cfg.memory_budget, resize=n in cfg.resize_levels)
            return {rel: writer.close()}

        inputs = {"image": level_hash(n), "predictor": spec_d, "patch": cfg.patch,
                  "shifts": cfg.to_dict()["shifts"], "seed": cfg.seed,
                  "resize": n in cfg.resize_levels, "ground_truth": r.inputs.get("ground_truth")}
        r.stage(f"predict_{n}", inputs, do_predict)

    # -- fuse -----------------------------------------------------------
    fused_rel = "fused.png"

    def do_fuse():
        maps = {n: read_pmap(out / prob_rels[n], mmap=True) for n in cfg.levels}
        mask = fuse(maps, cfg.vote, (w0, h0), cfg.upsampler)
        write_mask(out / fused_rel, mask)
        return _hash_map({fused_rel: out / fused_rel})

    fuse_inputs = {"maps": {str(n): r.stages[f"predict_{n}"]["artifacts"][prob_rels[n]] for n in cfg.levels},
                   "vote": cfg.vote.to_dict(), "upsampler": cfg.upsampler}
    r.stage("fuse", fuse_inputs, do_fuse)

    # -- evaluate -------------------------------------------------------
    if cfg.ground_truth:
        def do_evaluate():
            pred = read_mask(out / fused_rel)
            report = evaluate(pred, np.asarray(r.gt()) == TUMOR)
            (out / "report.json").write_text(report.to_json())
            return _hash_map({"report.json": out / "report.json"})

        r.stage("evaluate", {"fused": r.stages["fuse"]["artifacts"][fused_rel],
                             "ground_truth": r.inputs["ground_truth"]}, do_evaluate)

    r.write_manifest(complete=True)
    return RunManifest(out / MANIFEST, r.doc, r.executed, r.skipped)


def _build_spec(spec_d: dict, cfg: PipelineConfig, r: _Run, level: int) -> PredictorSpec:
    spec_d = json.loads(json.dumps(spec_d))
    if spec_d.get("kind") == "oracle":
        params = spec_d.setdefault("params", {})
        params.setdefault("seed", cfg.seed)
        gt = params.pop("gt", None)
        labels = load_ground_truth(gt) if gt is not None else (r.gt() if cfg.ground_truth else None)
        if labels is None:
            raise ConfigError("oracle predictor needs ground_truth in the config or a gt parameter")
        params["gt"] = level_labels(labels, level)
        return PredictorSpec("oracle", params)
    return spec_from_dict(spec_d)


def run(cfg: PipelineConfig) -> RunManifest:
    """Execute every stage from scratch (existing artifacts are overwritten)."""
    return _execute(cfg)


def resume(manifest_path, cfg: Optional[PipelineConfig] = None) -> RunManifest:
    """Re-enter a run, skipping stages whose artifacts are intact.

    ``cfg`` defaults to the snapshot stored in the manifest; a different
    config (ignoring execution-only fields such as ``workers``) or changed
    input files raise :class:`ManifestMismatchError`.
    """
    m = RunManifest.load(manifest_path)
    snap = PipelineConfig.from_dict(m.data["config"])
    cfg = snap if cfg is None else cfg
    if config_fingerprint(cfg) != m.data.get("config_fingerprint") or \
            config_fingerprint(snap) != m.data.get("config_fingerprint"):
        raise ManifestMismatchError("manifest mismatch: configuration differs from the recorded run")
    for key, path in (("input", cfg.input), ("ground_truth", cfg.ground_truth),
                      ("target_image", cfg.target_image)):
        if path and m.data["inputs"].get(key) != file_sha256(path):
            raise ManifestMismatchError(f"manifest mismatch: {key} file changed since the recorded run")
    return _execute(cfg, previous=m.data)

"""Command-line entry point: ``wsivote <subcommand> ...``.

Exit codes: 0 success, 2 configuration/usage error, 3 stage failure.
For ``run`` the precedence is: command-line flag > config file > default.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .augment import AugmentError, augment
from .colorspace import BackgroundThreshold, ColorStats, DegenerateStatsError, image_stats, partial_normalize
from .fusion import VoteConfig, fuse
from .io import PmapWriter, read_mask, read_pmap, write_image, write_labels, write_mask
from .metrics import evaluate, plot_sweep, sweep
from .pipeline import (ConfigError, IntegrityError, ManifestMismatchError, PipelineConfig, StageError,
                       load_ground_truth, load_raster, predict_level, resume, run)
from .predictor import PredictorError, spec_from_dict
from .pyramid import DEFAULT_LEVELS, MAX_LEVEL, pyr_down
from .raster import TUMOR, RasterError
from .tiling import TilingError, assemble, make_plan

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


class UsageError(ValueError):
    pass


def _json_arg(text):
    """Inline JSON or a path to a JSON file."""
    p = Path(text)
    if p.exists():
        return json.loads(p.read_text())
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"not a JSON file or JSON literal: {text}") from e


def _levels(text):
    return tuple(int(t) for t in text.split(",") if t.strip())


def _threshold(args):
    return BackgroundThreshold(*args.background) if args.background else BackgroundThreshold()


def _level_maps(items):
    out = {}
    for item in items:
        level, sep, path = item.partition("=")
        if not sep:
            raise UsageError(f"expected LEVEL=PATH, got {item!r}")
        out[int(level)] = read_pmap(path, mmap=True)
    return out


def _vote_config(args, levels):
    if args.double_vote:
        return VoteConfig.double_vote(args.th, args.n, levels)
    weights = {n: 1 for n in levels}
    if args.weights:
        weights.update({int(k): int(v) for k, v in _json_arg(args.weights).items()})
    return VoteConfig(args.th, args.n, weights)


def _emit(text, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


# -- subcommands --------------------------------------------------------------

def cmd_stats(args):
    stats = image_stats(load_raster(args.image), _threshold(args), block_rows=4096)
    _emit(stats.to_json(), args.output)


def cmd_normalize(args):
    if (args.target_stats is None) == (args.target_image is None):
        raise UsageError("give exactly one of --target-stats or --target-image")
    thr = _threshold(args)
    if args.target_stats is not None:
        target = ColorStats.from_dict(_json_arg(args.target_stats))
    else:
        target = image_stats(load_raster(args.target_image), thr, block_rows=4096)
    write_image(args.output, partial_normalize(load_raster(args.image), target, thr, block_rows=4096))


def cmd_pyramid(args):
    levels = _levels(args.levels)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    img = load_raster(args.image)
    h0, w0 = img.shape[:2]
    entries = {}
    cur = img
    for n in range(max(levels) + 1):
        if n:
            cur = pyr_down(cur)
        if n in levels:
            name = f"level_{n}.png"
            write_image(out / name, cur)
            entries[str(n)] = {"path": name, "width": cur.shape[1], "height": cur.shape[0]}
    (out / "pyramid.json").write_text(json.dumps(
        {"source": str(args.image), "width": w0, "height": h0, "levels": entries}, indent=2))


def cmd_predict(args):
    img = load_raster(args.image)
    h, w = img.shape[:2]
    spec_d = _json_arg(args.predictor)
    if spec_d.get("kind") == "oracle" and "gt" not in spec_d.get("params", {}):
        if not args.ground_truth:
            raise UsageError("oracle predictor needs --ground-truth (at this level's size)")
        spec_d.setdefault("params", {})["gt"] = args.ground_truth
    spec = spec_from_dict(spec_d, gt_loader=load_ground_truth)
    plan = make_plan(w, h, args.patch)
    budget = None if args.memory_budget_mb is None else int(args.memory_budget_mb * 2**20)
    with PmapWriter(args.output, w, h) as writer:
        predict_level(img, args.level, spec, plan, writer.write, workers=args.workers,
                      budget=budget, resize=args.resize)


def _group_of(plan, x, y):
    p = plan.patch
    for k, (dx, dy) in enumerate(plan.shifts):
        if (x + dx) % p == 0 and (y + dy) % p == 0:
            return k
    raise TilingError(f"tile origin ({x}, {y}) belongs to no shift group")


def cmd_assemble(args):
    """Tile manifest: {"width", "height", "patch", "shifts"?, "tiles": [{"x", "y", "pmap"}]}."""
    man_path = Path(args.manifest)
    man = json.loads(man_path.read_text())
    plan = make_plan(int(man["width"]), int(man["height"]), int(man.get("patch", 448)), man.get("shifts"))
    groups = [[] for _ in plan.shifts]
    for t in man["tiles"]:
        x, y = int(t["x"]), int(t["y"])
        k = int(t["group"]) if "group" in t else _group_of(plan, x, y)
        path = Path(t["pmap"])
        if not path.is_absolute():
            path = man_path.parent / path
        groups[k].append(((x, y), read_pmap(path)))
    with PmapWriter(args.output, plan.image_w, plan.image_h) as writer:
        writer.write(assemble(groups, plan))


def cmd_vote(args):
    maps = _level_maps(args.maps)
    cfg = _vote_config(args, sorted(maps))
    size = (args.width, args.height) if args.width and args.height else None
    write_mask(args.output, fuse(maps, cfg, size, args.upsampler))


def _gt_mask(path):
    if str(path).endswith(".npy"):
        return np.asarray(np.load(path, mmap_mode="r")) == TUMOR
    return read_mask(path)


def cmd_evaluate(args):
    _emit(evaluate(read_mask(args.prediction), _gt_mask(args.ground_truth)).to_json(), args.output)


def cmd_sweep(args):
    maps = _level_maps(args.maps)
    weights = None
    if args.double_vote:
        weights = VoteConfig.double_vote(0.5, 1, sorted(maps)).level_weights
    elif args.weights:
        weights = {n: 1 for n in maps} | {int(k): int(v) for k, v in _json_arg(args.weights).items()}
    th_grid = [float(t) for t in args.th_grid.split(",")]
    n_grid = [int(t) for t in args.n_grid.split(",")]
    res = sweep(maps, _gt_mask(args.ground_truth), th_grid, n_grid, weights, args.upsampler)
    _emit(res.to_csv(), args.output)
    if args.level_best:
        Path(args.level_best).write_text(res.level_best_csv())
    if args.svg:
        plot_sweep(res, args.svg, args.metric)


def _print_manifest(m):
    print(json.dumps({"manifest": str(m.path), "executed": m.executed, "skipped": m.skipped}))


def cmd_run(args):
    overrides = {
        "input": args.input, "ground_truth": args.ground_truth, "output_dir": args.output_dir,
        "workers": args.workers, "seed": args.seed, "patch": args.patch,
        "memory_budget_mb": args.memory_budget_mb, "upsampler": args.upsampler,
        "levels": list(_levels(args.levels)) if args.levels else None,
    }
    cfg_path = Path(args.config)
    d = json.loads(cfg_path.read_text())
    if args.th is not None or args.n is not None:
        vote_d = dict(d.get("vote", {}))
        if args.th is not None:
            vote_d["threshold"] = args.th
        if args.n is not None:
            vote_d["min_votes"] = args.n
        overrides["vote"] = vote_d
    # flag paths are relative to the working directory, config paths to the config file
    for key in ("input", "ground_truth", "output_dir"):
        if overrides[key] is not None:
            overrides[key] = str(Path(overrides[key]).resolve())
    d.update({k: v for k, v in overrides.items() if v is not None})
    _print_manifest(run(PipelineConfig.from_dict(d, base_dir=cfg_path.parent)))


def cmd_resume(args):
    cfg = None
    if args.workers is not None:
        from .pipeline import RunManifest
        snap = RunManifest.load(args.manifest).data["config"]
        cfg = PipelineConfig.from_dict({**snap, "workers": args.workers})
    _print_manifest(resume(args.manifest, cfg))


def cmd_augment(args):
    img = load_raster(args.image)
    gt = load_ground_truth(args.ground_truth)
    ops = _json_arg(args.ops)
    if not isinstance(ops, list):
        raise UsageError("--ops must be a JSON list")
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, (a, g) in enumerate(augment(img, np.asarray(gt), ops, args.seed)):
        write_image(out / f"aug_{i:03d}.png", a)
        write_labels(out / f"aug_{i:03d}_gt.png", g)


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wsivote", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"wsivote {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def bg(p):
        p.add_argument("--background", nargs=3, type=int, metavar=("R", "G", "B"),
                       help="background threshold (default 235 210 235)")

    def vote_args(p):
        p.add_argument("--maps", nargs="+", required=True, metavar="LEVEL=PMAP")
        p.add_argument("--weights", help="JSON {level: votes}; default one vote per level")
        p.add_argument("--double-vote", action="store_true", help="two votes for levels 6 and 7")
        p.add_argument("--upsampler", choices=("nearest", "pyramid"), default="nearest")

    p = sub.add_parser("stats", help="foreground lab statistics of an image")
    p.add_argument("image")
    p.add_argument("-o", "--output")
    bg(p)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("normalize", help="partial colour normalisation")
    p.add_argument("image")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--target-stats", help="ColorStats JSON (file or literal)")
    p.add_argument("--target-image")
    bg(p)
    p.set_defaults(fn=cmd_normalize)

    p = sub.add_parser("pyramid", help="write pyramid levels as PNG plus pyramid.json")
    p.add_argument("image")
    p.add_argument("-o", "--output-dir", required=True)
    p.add_argument("--levels", default=",".join(map(str, DEFAULT_LEVELS)))
    p.set_defaults(fn=cmd_pyramid)

    p = sub.add_parser("predict", help="tiled prediction and weighted assembly of one level")
    p.add_argument("image", help="the level image")
    p.add_argument("--level", type=int, required=True, choices=range(MAX_LEVEL + 1))
    p.add_argument("--predictor", required=True, help="predictor spec JSON (file or literal)")
    p.add_argument("--ground-truth", help="label mask at this level, for the oracle")
    p.add_argument("--patch", type=int, default=448)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--memory-budget-mb", type=float)
    p.add_argument("--resize", action="store_true", help="predict the whole level as one resized patch")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("assemble", help="weighted assembly from a tile manifest")
    p.add_argument("manifest")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=cmd_assemble)

    p = sub.add_parser("vote", help="fuse per-level prob maps into a binary mask")
    vote_args(p)
    p.add_argument("--th", type=float, default=0.7)
    p.add_argument("--n", type=int, default=6)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=cmd_vote)

    p = sub.add_parser("evaluate", help="F1, Jaccard and directed Hausdorff")
    p.add_argument("prediction")
    p.add_argument("ground_truth")
    p.add_argument("-o", "--output")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", help="metrics over a (Th, N) grid")
    vote_args(p)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--th-grid", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    p.add_argument("--n-grid", default="1,2,3,4,5,6,7")
    p.add_argument("--metric", choices=("f1", "jaccard"), default="jaccard")
    p.add_argument("--level-best", help="CSV of each level's best threshold")
    p.add_argument("--svg", help="write a score-vs-Th plot")
    p.add_argument("-o", "--output")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("run", help="full pipeline from a JSON config")
    p.add_argument("config")
    p.add_argument("--input")
    p.add_argument("--ground-truth")
    p.add_argument("--output-dir")
    p.add_argument("--levels")
    p.add_argument("--patch", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--th", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--upsampler", choices=("nearest", "pyramid"))
    p.add_argument("--memory-budget-mb", type=float)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("resume", help="continue a run from its manifest")
    p.add_argument("manifest")
    p.add_argument("--workers", type=int)
    p.set_defaults(fn=cmd_resume)

    p = sub.add_parser("augment", help="paired image/label augmentation")
    p.add_argument("image")
    p.add_argument("ground_truth")
    p.add_argument("--ops", required=True, help='JSON list, e.g. ["flip-h", {"op": "rot90", "k": 2}]')
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output-dir", required=True)
    p.set_defaults(fn=cmd_augment)
    return ap


CONFIG_ERRORS = (UsageError, ConfigError, ManifestMismatchError, AugmentError, json.JSONDecodeError,
                 FileNotFoundError, KeyError)
STAGE_ERRORS = (StageError, IntegrityError, PredictorError, RasterError, DegenerateStatsError, OSError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except CONFIG_ERRORS as e:
        print(f"wsivote: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except STAGE_ERRORS as e:
        print(f"wsivote: error: {e}", file=sys.stderr)
        return EXIT_STAGE
    except ValueError as e:
        print(f"wsivote: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

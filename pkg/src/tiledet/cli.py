"""Command-line entry point.

Machine-readable results (JSON, JSON lines, CSV) go to stdout or to the
requested output files; progress and diagnostics go to stderr. Exit codes:
0 success, 2 configuration problems, 3 cfg/weights consistency failures,
4 I/O failures.
"""

import argparse
import json
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, bench, compliance, dataset, engine, kernels, model
from . import augment as aug
from . import tiling
from .detect import write_jsonl
from .model import CfgError, ConsistencyError

EXIT_CONFIG = 2
EXIT_CONSISTENCY = 3
EXIT_IO = 4


class ConfigError(ValueError):
    pass


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _parse_frame_size(value: str) -> tuple:
    try:
        w, h = (int(p) for p in value.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--frame must look like 1920x1080, got {value!r}")
    if w < 1 or h < 1:
        raise ConfigError(f"frame dimensions must be positive, got {value!r}")
    return w, h


def _profile(name: str) -> tiling.AreaProfile:
    try:
        return tiling.PROFILES[name.lower()]
    except KeyError:
        raise ConfigError(
            f"unknown profile {name!r}; choose from {sorted(tiling.PROFILES)}")


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} {path!r} does not exist")
    return p


# --- subcommands ---------------------------------------------------------------

def cmd_plan_tiles(args) -> int:
    w, h = _parse_frame_size(args.frame)
    profile = _profile(args.profile)
    plan = tiling.make_plan(profile, w, h, margin=args.margin)
    report = tiling.plan_report(plan, profile, object_size=args.object_size)
    _emit(json.dumps(report, indent=2, sort_keys=True) + "\n", args.out)
    return 0


def cmd_augment(args) -> int:
    cfg = aug.AugmentConfig(
        target_size=args.target_size, seed=args.seed,
        multiplier=args.multiplier, collate_mode=args.collate_mode,
        brightness_range=args.brightness, relaxed=args.relaxed)
    corpus = list(dataset.iter_corpus(args.in_dir))
    modes = ("all",) if args.mode == "all" else (args.mode,)
    result = aug.augment_corpus(corpus, cfg, modes=modes)
    out = Path(args.out_dir)
    for item in result.outputs:
        dataset.save_labeled(out, item)
    dataset.write_manifest(out, result.manifest)
    _log(f"augment: {len(corpus)} sources -> {len(result.outputs)} outputs,"
         f" {len(result.skipped)} skipped")
    for name, reason in result.skipped:
        _log(f"  skipped {name}: {reason}")
    return 0


def cmd_mosaic(args) -> int:
    cfg = aug.AugmentConfig(seed=args.seed, mosaic_cell=args.cell,
                            brightness_range=args.brightness)
    corpus = list(dataset.iter_corpus(args.in_dir))
    if len(corpus) < 4:
        raise ConfigError(f"mosaic needs at least 4 corpus images, got {len(corpus)}")
    out = Path(args.out_dir)
    entries = []
    for i in range(args.count):
        rng = np.random.default_rng([args.seed, i])
        picks = [corpus[int(rng.integers(0, len(corpus)))] for _ in range(4)]
        item = aug.mosaic(picks, cfg, rng)
        item = dataset.LabeledImage(f"mosaic{i}", item.image, item.boxes)
        dataset.save_labeled(out, item)
        entries.append({"output": item.name, "transform": "mosaic",
                        "sources": [p.name for p in picks], "seed": [args.seed, i]})
    dataset.write_manifest(out, {"seed": args.seed, "entries": entries})
    _log(f"mosaic: wrote {args.count} images to {out}")
    return 0


def cmd_check_odd(args) -> int:
    constraints = compliance.OddConstraints()
    if args.constraints:
        path = _require_file(args.constraints, "constraints file")
        constraints = compliance.OddConstraints.from_json_obj(
            json.loads(path.read_text()))
    corpus = dataset.iter_corpus(args.in_dir)
    report = compliance.check_corpus(corpus, constraints)
    _emit(report.to_json() + "\n", args.out)
    if args.plots:
        paths = compliance.render_plots(report, args.plots)
        _log("wrote " + ", ".join(str(p) for p in paths))
    _log(f"check-odd verdict: {report.verdict}")
    return 0


def cmd_parse_model(args) -> int:
    cfg_path = _require_file(args.cfg, "cfg file")
    graph = model.parse_cfg(cfg_path.read_text())
    summary = {
        "input_shape": list(graph.input_shape),
        "layers": [
            {"index": i, "kind": spec.kind,
             "output_shape": list(graph.shapes[i]),
             "params": model.layer_param_count(spec, graph._input_channels(i))}
            for i, spec in enumerate(graph.layers)],
        "total_params": graph.param_count(),
        "footprint": kernels.footprint(graph),
        "weights": None,
    }
    if args.weights:
        weights_path = _require_file(args.weights, "weights file")
        model.bind_weights(graph, weights_path.read_bytes())
        summary["weights"] = {"file": str(weights_path), "consistent": True}
    _emit(json.dumps(summary, indent=2, sort_keys=True) + "\n", args.out)
    return 0


def cmd_run(args) -> int:
    if not 0.0 <= args.confidence <= 1.0:
        raise ConfigError(f"--confidence must be in [0, 1], got {args.confidence}")
    if not 0.0 <= args.iou <= 1.0:
        raise ConfigError(f"--iou must be in [0, 1], got {args.iou}")
    if args.workers < 1:
        raise ConfigError(f"--workers must be >= 1, got {args.workers}")
    if args.format not in engine.ENGINE_FORMATS:
        raise ConfigError(f"--format must be one of {engine.ENGINE_FORMATS}")
    cfg_path = _require_file(args.cfg, "cfg file")
    weights_path = _require_file(args.weights, "weights file")
    frame_path = _require_file(args.frame, "frame image")

    graph = model.parse_cfg(cfg_path.read_text())
    graph = model.bind_weights(graph, weights_path.read_bytes())
    frame = dataset.load_image(frame_path)
    if graph.input_shape[2] != frame.shape[2]:
        raise ConfigError(
            f"frame has {frame.shape[2]} channels, model expects"
            f" {graph.input_shape[2]}")

    profile = _profile(args.profile)
    if profile.resize_to != graph.input_shape[0]:
        raise ConfigError(
            f"profile {profile.tag} feeds {profile.resize_to} px tiles but the"
            f" model expects {graph.input_shape[0]} px inputs")
    plan = tiling.make_plan(profile, frame.shape[1], frame.shape[0])

    result = engine.run_frame(graph, frame, plan, fmt=args.format,
                              confidence=args.confidence,
                              iou_threshold=args.iou, workers=args.workers)

    if args.out:
        with open(args.out, "w") as fh:
            write_jsonl(result.detections, fh)
    else:
        write_jsonl(result.detections, sys.stdout)

    timing = {
        "tiles": len(plan.origins),
        "per_tile_detections": result.per_tile,
        "merged_detections": len(result.detections),
        "stages_ns": result.stage_times_ns,
    }
    if args.timing:
        Path(args.timing).write_text(
            json.dumps(timing, indent=2, sort_keys=True) + "\n")
    else:
        _log(json.dumps(timing, sort_keys=True))
    return 0


def _parse_gemm_shape(value: str) -> kernels.GemmShape:
    try:
        m, n, k = (int(p) for p in value.lower().split("x"))
        return kernels.GemmShape(m, n, k)
    except ValueError as exc:
        raise ConfigError(f"--shape must look like MxNxK, got {value!r}: {exc}")


def _parse_block_params(value: str | None) -> kernels.GemmBlockParams | None:
    if not value:
        return None
    fields = {}
    try:
        for part in value.split(","):
            key, _, raw = part.partition("=")
            fields[key.strip().lower()] = int(raw)
        return kernels.GemmBlockParams(**fields)
    except (ValueError, TypeError) as exc:
        raise ConfigError(
            f"--params must look like bm=16,bn=16,bk=2,tm=8, got {value!r}: {exc}")


def cmd_bench_gemm(args) -> int:
    shape = _parse_gemm_shape(args.shape)
    params = _parse_block_params(args.params)
    rng = np.random.default_rng(args.seed)
    a = rng.standard_normal((shape.m, shape.k), dtype=np.float32)
    b = rng.standard_normal((shape.k, shape.n), dtype=np.float32)
    subject = f"gemm:{args.shape}:{args.format}"
    report = bench.run_bench(
        lambda: kernels.gemm_blocked(a, b, params=params, fmt=args.format),
        subject, warmup=args.warmup, iterations=args.iterations)
    _emit(report.to_json() + "\n", args.out)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            bench.write_csv(report, fh)
    if args.baseline:
        base = bench.BenchReport.from_json(
            _require_file(args.baseline, "baseline report").read_text())
        _log(json.dumps(bench.compare(base, report), sort_keys=True))
    return 0


def cmd_bench_model(args) -> int:
    cfg_path = _require_file(args.cfg, "cfg file")
    weights_path = _require_file(args.weights, "weights file")
    graph = model.bind_weights(model.parse_cfg(cfg_path.read_text()),
                               weights_path.read_bytes())
    profile = _profile(args.tiles)
    rng = np.random.default_rng(args.seed)
    tile = rng.random(graph.input_shape, dtype=np.float32)
    n_tiles = len(tiling.make_plan(profile, 1920, 1080).origins)
    subject = f"model:{cfg_path.name}:{args.format}:{profile.tag}"

    def subject_fn():
        for _ in range(n_tiles):
            engine.run_layers(graph, tile, fmt=args.format)

    report = bench.run_bench(subject_fn, subject, warmup=args.warmup,
                             iterations=args.iterations,
                             reference_note=f"{n_tiles} tiles per frame")
    _emit(report.to_json() + "\n", args.out)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            bench.write_csv(report, fh)
    return 0


# --- wiring ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tiledet",
        description="tiled object-detection pipeline and dataset tooling")
    parser.add_argument(
        "--version", action="version",
        version=(f"tiledet {__version__} (python {platform.python_version()},"
                 f" numpy {np.__version__})"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan-tiles", help="compute a tile decomposition")
    p.add_argument("--frame", required=True, help="frame size, e.g. 1920x1080")
    p.add_argument("--profile", required=True, help="a1a2 or a3")
    p.add_argument("--margin", type=int, default=tiling.DEFAULT_MARGIN)
    p.add_argument("--object-size", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_plan_tiles)

    p = sub.add_parser("augment", help="expand a labeled corpus")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--multiplier", type=int, default=3)
    p.add_argument("--mode", default="all",
                   choices=["all", "coverage", "mosaic", "brightness", "multi"])
    p.add_argument("--target-size", type=int, default=640)
    p.add_argument("--collate-mode", default="pool",
                   choices=["pool", "replicate"])
    p.add_argument("--brightness", type=float, default=0.25)
    p.add_argument("--relaxed", action="store_true",
                   help="accept sources of any size >= target")
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("mosaic", help="write mosaic aggregations of a corpus")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cell", type=int, default=320)
    p.add_argument("--brightness", type=float, default=0.25)
    p.set_defaults(fn=cmd_mosaic)

    p = sub.add_parser("check-odd", help="check a corpus against ODD constraints")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--constraints", help="JSON constraint overrides")
    p.add_argument("--out")
    p.add_argument("--plots", help="directory for heat-map / histogram PNGs")
    p.set_defaults(fn=cmd_check_odd)

    p = sub.add_parser("parse-model", help="parse a cfg (and bind weights)")
    p.add_argument("--cfg", required=True)
    p.add_argument("--weights")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_parse_model)

    p = sub.add_parser("run", help="frame -> detections through the pipeline")
    p.add_argument("--cfg", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--frame", required=True, help="input image path")
    p.add_argument("--profile", default="a3")
    p.add_argument("--format", default="fp32")
    p.add_argument("--confidence", type=float, default=engine.DEFAULT_CONFIDENCE)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="detections JSONL path (default stdout)")
    p.add_argument("--timing", help="timing summary JSON path (default stderr)")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("bench-gemm", help="time the blocked GEMM")
    p.add_argument("--shape", required=True, help="MxNxK, e.g. 1024x400x4608")
    p.add_argument("--params", help="bm=16,bn=16,bk=2,tm=8 (default: by regime)")
    p.add_argument("--format", default="fp32", choices=["fp32", "fp16", "q16"])
    p.add_argument("--iterations", type=int, default=30)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--csv")
    p.add_argument("--baseline", help="JSON report to compare against")
    p.set_defaults(fn=cmd_bench_gemm)

    p = sub.add_parser("bench-model", help="time full-model tile inference")
    p.add_argument("--cfg", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--tiles", default="a3", help="a1a2 or a3")
    p.add_argument("--format", default="fp32")
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--csv")
    p.set_defaults(fn=cmd_bench_model)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CfgError) as exc:
        _log(f"error: {exc}")
        return EXIT_CONFIG
    except ConsistencyError as exc:
        _log(f"consistency error: {exc}")
        return EXIT_CONSISTENCY
    except OSError as exc:
        _log(f"i/o error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

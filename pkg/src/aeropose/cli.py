"""Command-line entry point: ``aeropose <subcommand> ...``.

Exit codes: 0 success, 1 operational failure, 2 invalid input.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import yaml

from . import bench as benchmod
from .dataset import (
    DatasetParseError,
    DatasetValidationError,
    dataset_stats,
    dumps_dataset,
    filter_person_classes,
    format_stats_table,
    load_dataset,
    merge_with_id_map,
)
from .evaluator import (
    EvalConfig,
    evaluate_detections,
    evaluate_detections_nwd,
    evaluate_keypoints,
    format_report_table,
    load_results,
    weighted_average,
)
from .geometry import ContractError, NwdConfig
from .heatmap import CodecConfig
from .pipeline import (
    BackendError,
    MockDetector,
    MockPoseBackend,
    PoseResult,
    dumps_results,
    ground_truth_backends,
    load_frames,
    render_overlay,
    results_by_frame,
    run_sequence,
    timing_sidecar,
)

log = logging.getLogger("aeropose")

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
INPUT_ERRORS = (DatasetParseError, DatasetValidationError, ContractError)
# raised while reading user-named input files
INPUT_FILE_ERRORS = INPUT_ERRORS + (FileNotFoundError, IsADirectoryError)


class InputError(Exception):
    """Bad command-line input detected after argument parsing."""


def _thresholds(text):
    """``start:step:stop`` or a comma list."""
    if ":" in text:
        start, step, stop = (float(x) for x in text.split(":"))
        n = int(round((stop - start) / step)) + 1
        return tuple(round(start + i * step, 10) for i in range(n))
    return tuple(float(x) for x in text.split(","))


def _dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_many(paths, split, jobs):
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as ex:
        futs = [ex.submit(load_dataset, p, split) for p in paths]
        out = []
        for p, fut in zip(paths, futs):
            try:
                out.append(fut.result())
            except INPUT_FILE_ERRORS as e:
                raise InputError(f"{p}: {e}") from e
        return out


# --- subcommands ---------------------------------------------------------


def cmd_merge(args) -> int:
    if not args.input:
        raise InputError("merge needs at least one --input")
    keeps = args.keep or ["person"]
    if len(keeps) not in (1, len(args.input)):
        raise InputError("--keep must be given once or once per --input")
    if len(keeps) == 1:
        keeps = keeps * len(args.input)
    parts = _load_many(args.input, args.split, args.jobs)
    filtered = []
    for p, k in zip(parts, keeps):
        names = [n.strip() for n in k.split(",") if n.strip()]
        filtered.append(filter_person_classes(p, names))
    merged, idmap = merge_with_id_map(filtered)
    with open(args.output, "w", encoding="utf-8") as f:
        f.write(dumps_dataset(merged))
    idmap_path = os.path.splitext(args.output)[0] + ".idmap.json"
    _dump_json(idmap.to_dict(), idmap_path)
    rows = [(os.path.basename(p), dataset_stats(d)) for p, d in zip(args.input, filtered)]
    rows.append(("merged", dataset_stats(merged)))
    print(format_stats_table(rows))
    return EXIT_OK


def cmd_stats(args) -> int:
    parts = _load_many(args.files, args.split, args.jobs)
    rows = [(os.path.basename(p), dataset_stats(d)) for p, d in zip(args.files, parts)]
    print(format_stats_table(rows))
    if args.json:
        _dump_json([{"dataset": n, **s} for n, s in rows], args.json)
    return EXIT_OK


def _eval_config(args) -> EvalConfig:
    kw = {"max_dets": args.max_dets, "nwd_c": args.nwd_c}
    if args.thresholds:
        key = "oks_thresholds" if args.command == "eval-kp" else "iou_thresholds"
        kw[key] = _thresholds(args.thresholds)
    return EvalConfig(**kw)


def cmd_eval(args) -> int:
    gts, results = args.gt or [], args.results or []
    if not gts or len(gts) != len(results):
        raise InputError("give --gt and --results the same number of times (at least once)")
    names = args.name or [os.path.splitext(os.path.basename(g))[0] for g in gts]
    if len(names) != len(gts):
        raise InputError("--name must be given once per --gt")
    cfg = _eval_config(args)
    datasets = _load_many(gts, args.split, args.jobs)
    if args.command == "eval-kp":
        fn = evaluate_keypoints
    elif args.similarity == "nwd":
        fn = evaluate_detections_nwd
    else:
        fn = evaluate_detections
    rows = []
    for name, d, rpath in zip(names, datasets, results):
        try:
            dets = load_results(rpath)
        except (json.JSONDecodeError, ContractError, FileNotFoundError) as e:
            raise InputError(f"{rpath}: {e}") from e
        try:
            rows.append((name, fn(d, dets, cfg)))
        except ContractError as e:
            raise InputError(f"{rpath}: {e}") from e
    counts = {n: len(d.images) for n, d in zip(names, datasets)}
    if args.counts:
        with open(args.counts, encoding="utf-8") as f:
            counts.update({k: int(v) for k, v in json.load(f).items()})
    weighted = None
    excluded = set(args.exclude or [])
    pool = [(r, counts[n]) for n, r in rows if n not in excluded]
    if len(rows) > 1 or args.counts:
        if not pool:
            raise InputError("every report was excluded from the weighted average")
        weighted = weighted_average(pool)
    print(format_report_table(rows, weighted))
    if args.output:
        doc = {
            "reports": [{"dataset": n, "frames": counts[n], **r.to_dict()} for n, r in rows],
            "weighted_average": weighted.to_dict() if weighted else None,
            "excluded_from_average": sorted(excluded),
        }
        _dump_json(doc, args.output)
    return EXIT_OK


def _parse_backend(spec, role, cfg, ann_cache):
    """Backend spec strings.

    detector: ``gt:ANN`` | ``empty`` | ``delay:MS[:N]`` | ``external:CMD``
    pose:     ``gt:ANN`` | ``zeros`` | ``delay:MS`` | ``external:CMD``
    """
    kind, _, rest = spec.partition(":")
    if kind == "external":
        from .protocol import ExternalDetector, ExternalPose, ExternalProcess

        proc = ExternalProcess(rest)
        return (ExternalDetector(proc) if role == "detector" else ExternalPose(proc)), proc
    if kind == "gt":
        if rest not in ann_cache:
            try:
                ann_cache[rest] = load_dataset(rest)
            except INPUT_FILE_ERRORS as e:
                raise InputError(f"{rest}: {e}") from e
        det, pose = ground_truth_backends(ann_cache[rest], cfg)
        return (det if role == "detector" else pose), None
    if role == "detector" and kind == "empty":
        return MockDetector(lambda fid: []), None
    if role == "pose" and kind == "zeros":
        return MockPoseBackend(lambda ctx: None, cfg), None
    if kind == "delay":
        from .synthetic import centered_box, template_keypoints

        fields = rest.split(":") if rest else ["0"]
        ms = float(fields[0])
        if role == "detector":
            n = int(fields[1]) if len(fields) > 1 else 1
            box = centered_box(640, 480)
            return MockDetector(lambda fid: [box] * n, delay_ms=ms), None
        return MockPoseBackend(lambda ctx: template_keypoints(ctx.box), cfg, delay_ms=ms), None
    raise InputError(f"unknown {role} backend spec {spec!r}")


def _codec(args) -> CodecConfig:
    return CodecConfig(sigma=args.sigma, peak_window=args.peak_window, kp_conf_threshold=args.kp_threshold)


def _frames(args):
    if getattr(args, "synthetic", 0):
        from .synthetic import synthetic_frames

        return synthetic_frames(args.synthetic, args.seed)
    if not args.frames:
        raise InputError("--frames DIR is required")
    if not os.path.isdir(args.frames):
        raise InputError(f"frame directory {args.frames} does not exist")
    ids = None
    if args.ann:
        try:
            d = load_dataset(args.ann)
        except INPUT_FILE_ERRORS as e:
            raise InputError(f"{args.ann}: {e}") from e
        ids = {im.file_name: im.id for im in d.images}
    return load_frames(args.frames, ids)


def _with_backends(args, fn):
    cfg = _codec(args)
    cache, procs = {}, []
    try:
        det, p1 = _parse_backend(args.detector, "detector", cfg, cache)
        procs.append(p1)
        pose, p2 = _parse_backend(args.pose, "pose", cfg, cache)
        procs.append(p2)
        return fn(det, pose, cfg)
    finally:
        for p in procs:
            if p is not None:
                p.close()


def cmd_run(args) -> int:
    def go(det, pose, cfg):
        results = list(
            run_sequence(
                _frames(args), det, pose, args.det_threshold, cfg,
                batch_size=args.batch_size, expansion=args.expansion, pipelined=args.pipelined,
            )
        )
        with open(args.output, "w", encoding="utf-8") as f:
            f.write(dumps_results(results))
        timings = args.timings or os.path.splitext(args.output)[0] + ".timings.json"
        _dump_json(timing_sidecar(results), timings)
        failed = [r.frame_id for r in results if not r.ok]
        print(f"{len(results)} frames, {sum(len(r.persons) for r in results)} persons, {len(failed)} failed")
        for r in results:
            if not r.ok:
                print(f"frame {r.frame_id}: {r.error_stage} failed: {r.error}", file=sys.stderr)
        return EXIT_FAIL if failed and args.strict else EXIT_OK

    return _with_backends(args, go)


def cmd_bench(args) -> int:
    def go(det, pose, cfg):
        report = benchmod.bench_pipeline(
            list(_frames(args)), det, pose, cfg, args.det_threshold,
            repeats=args.repeats, warmup=args.warmup, fps_budget=args.fps, batch_size=args.batch_size,
        )
        print(benchmod.format_latency_table(report))
        if args.output:
            _dump_json(report.to_dict(), args.output)
        return EXIT_OK

    return _with_backends(args, go)


def cmd_render(args) -> int:
    try:
        with open(args.results, encoding="utf-8") as f:
            doc = json.load(f)
    except (json.JSONDecodeError, FileNotFoundError) as e:
        raise InputError(f"{args.results}: {e}") from e
    cfg = _codec(args)
    by_frame = results_by_frame(doc, cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    n = 0
    for f in _frames(args):
        r = by_frame.get(f.id, PoseResult(f.id))
        stem = os.path.splitext(f.name or f"frame_{f.id:06d}")[0]
        render_overlay(f, r, os.path.join(args.out_dir, stem + ".png"))
        n += 1
    print(f"wrote {n} overlays to {args.out_dir}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="JSON or YAML file of option defaults")
    p.add_argument("--print-config", action="store_true", help="print effective options and exit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="max worker threads")
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("-v", "--verbose", action="store_true")


def _add_codec(p):
    p.add_argument("--sigma", type=float, default=2.0, help="heatmap Gaussian std in cells")
    p.add_argument("--peak-window", type=int, default=1)
    p.add_argument("--kp-threshold", type=float, default=0.4)


def _add_pipeline(p):
    p.add_argument("--frames", help="directory of frame images (sorted by name)")
    p.add_argument("--ann", help="annotation file mapping file names to image ids")
    p.add_argument("--detector", default="empty")
    p.add_argument("--pose", default="zeros")
    p.add_argument("--det-threshold", type=float, default=0.4)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--expansion", type=float, default=1.0)
    _add_codec(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aeropose", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("merge", help="filter person classes and merge datasets")
    _add_common(p)
    p.add_argument("-i", "--input", action="append", help="COCO annotation file (repeatable)")
    p.add_argument("-k", "--keep", action="append", help="comma list of class names kept as person")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("stats", help="dataset statistics")
    _add_common(p)
    p.add_argument("files", nargs="+")
    p.add_argument("--json", help="write machine-readable stats here")
    p.set_defaults(func=cmd_stats)

    for name in ("eval-det", "eval-kp"):
        p = sub.add_parser(name, help=f"COCO {'box' if name == 'eval-det' else 'keypoint'} evaluation")
        _add_common(p)
        p.add_argument("--gt", action="append")
        p.add_argument("--results", action="append")
        p.add_argument("--name", action="append", help="row label per --gt")
        p.add_argument("--counts", help="JSON {name: frame count} for the weighted average")
        p.add_argument("--exclude", action="append", help="row name left out of the weighted average")
        p.add_argument("--thresholds", help="start:step:stop or comma list")
        p.add_argument("--max-dets", type=int, default=100)
        p.add_argument("--nwd-c", type=float, default=NwdConfig().c)
        p.add_argument("--similarity", choices=("iou", "nwd"), default="iou")
        p.add_argument("-o", "--output")
        p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="run the pipeline over a frame directory")
    _add_common(p)
    _add_pipeline(p)
    p.add_argument("--pipelined", action="store_true")
    p.add_argument("--strict", action="store_true", help="exit 1 if any frame failed")
    p.add_argument("--timings")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="per-stage latency benchmark")
    _add_common(p)
    _add_pipeline(p)
    p.add_argument("--synthetic", type=int, default=0, help="use N random frames instead of --frames")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=benchmod.DEFAULT_WARMUP)
    p.add_argument("--fps", type=float, default=benchmod.DEFAULT_FPS)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("render", help="draw results onto frames")
    _add_common(p)
    p.add_argument("--frames", required=True)
    p.add_argument("--ann")
    p.add_argument("--results", required=True)
    p.add_argument("--out-dir", required=True)
    _add_codec(p)
    p.set_defaults(func=cmd_render)
    return parser


def _load_config(path):
    with open(path, encoding="utf-8") as f:
        data = yaml.safe_load(f) if path.endswith((".yml", ".yaml")) else json.load(f)
    if not isinstance(data, dict):
        raise InputError(f"config {path} must hold a mapping")
    return {k.replace("-", "_"): v for k, v in data.items()}


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        # flags beat config values, config beats built-in defaults
        conf = _load_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(conf) - known)
        if unknown:
            raise InputError(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**conf)
        args = parser.parse_args(argv)
    _validate(args)
    return args


def _validate(args):
    if args.jobs < 1:
        raise InputError("--jobs must be >= 1")
    if hasattr(args, "sigma"):
        _codec(args)
    if hasattr(args, "nwd_c"):
        NwdConfig(args.nwd_c)
    if hasattr(args, "det_threshold") and not 0.0 <= args.det_threshold <= 1.0:
        raise InputError("--det-threshold must lie in [0, 1]")
    if getattr(args, "batch_size", None) is not None and args.batch_size < 1:
        raise InputError("--batch-size must be >= 1")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except (InputError, ContractError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if args.print_config:
        cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "print_config")}
        print(json.dumps(cfg, indent=2, sort_keys=True, default=str))
        return EXIT_OK
    try:
        return args.func(args)
    except (InputError, *INPUT_ERRORS) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (OSError, BackendError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

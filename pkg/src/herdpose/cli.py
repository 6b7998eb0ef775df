"""Command-line entry point: tile, patch, eval, track, synth, overlay.

Configuration precedence is flags > config file (JSON) > built-in
defaults; the fully resolved configuration and the SHA-256 digests of all
input files are echoed into every output artifact. Outputs are written
atomically (temp file + rename) and contain no timestamps, so identical
invocations on identical inputs produce byte-identical files. The
HERDPOSE_WORKERS environment variable sizes the worker pool for per-frame
work; results are assembled in input order and do not depend on it.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import evaluation, framing, overlay, synth, tracking
from .core import FrameRecord, Skeleton
from .ingest import (
    Dataset,
    IngestError,
    ParseError,
    PredictionSet,
    ValidationError,
    atomic_write_text,
    dump_canonical_json,
    load_annotations,
    load_predictions,
    round6,
    save_annotations,
    save_predictions,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_SCHEMA = 4

EPILOG = """\
exit codes:
  0  success
  1  unexpected internal error
  2  usage error (unknown flag or subcommand)
  3  missing input file
  4  malformed or invariant-violating input (parse/schema/validation)

environment:
  HERDPOSE_WORKERS  worker pool size for per-frame work (default 1);
                    outputs are identical for any setting
"""

DEFAULTS = {
    "synth": {
        "seed": 0,
        "n_animals": 5,
        "n_frames": 30,
        "frame_width": 1920,
        "frame_height": 1080,
        "size_min": 8.0,
        "size_max": 70.0,
        "speed_min": 0.5,
        "speed_max": 2.0,
        "heading_noise": 0.0,
        "bbox_jitter": 0.0,
        "keypoint_jitter": 0.0,
        "false_positive_rate": 0.0,
        "miss_rate": 0.0,
        "video_id": "synth-000",
        "occluded_ear_size": 12.0,
        "separate_territories": False,
    },
    "tile": {
        "side": framing.DEFAULT_TILE_SIDE,
        "overlap": framing.DEFAULT_TILE_OVERLAP,
        "min_visible_fraction": framing.DEFAULT_MIN_VISIBLE_FRACTION,
    },
    "patch": {
        "margin": framing.DEFAULT_PATCH_MARGIN,
        "out_size": framing.DEFAULT_PATCH_OUT_SIZE,
    },
    "eval": {
        "nms_iou": 0.5,
        "match_iou": 0.5,
        "pck_alpha": 0.2,
        "oks_falloff": 0.1,
        "sweep_start": 0.3,
        "sweep_stop": 0.95,
        "sweep_step": 0.05,
        "weighted_average": True,
        "include_occluded": False,
    },
    "track": {
        "nms_iou": 0.5,
        "iou_gate": 0.3,
        "confirm_hits": 3,
        "max_age": 5,
        "min_size": 50.0,
        "patch_margin": framing.DEFAULT_PATCH_MARGIN,
        "patch_out_size": framing.DEFAULT_PATCH_OUT_SIZE,
    },
    "overlay": {
        "draw_gt": True,
    },
}


def _workers() -> int:
    raw = os.environ.get("HERDPOSE_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _pool_map(fn, items):
    """Order-preserving map over a bounded worker pool."""
    items = list(items)
    n = _workers()
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _resolve_config(cmd: str, args) -> dict:
    """flags > config file > defaults; unknown config keys are rejected."""
    resolved = dict(DEFAULTS[cmd])
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(args.config)
        try:
            file_cfg = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ParseError(path, e.msg, offset=e.pos) from e
        if not isinstance(file_cfg, dict):
            raise ValidationError(path, "config file must be a JSON object")
        unknown = sorted(set(file_cfg) - set(resolved))
        if unknown:
            raise ValidationError(path, f"unknown config key(s) for '{cmd}': {unknown}")
        resolved.update(file_cfg)
    for key in DEFAULTS[cmd]:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _provenance(config: dict, inputs: dict) -> dict:
    return {"config": config, "inputs": inputs}


def _write_json(path, obj) -> None:
    atomic_write_text(path, dump_canonical_json(obj))


def _safe_name(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", text)


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    cfg = _resolve_config("synth", args)
    scenario = synth.SynthScenario(
        seed=int(cfg["seed"]),
        n_animals=int(cfg["n_animals"]),
        frame_width=int(cfg["frame_width"]),
        frame_height=int(cfg["frame_height"]),
        n_frames=int(cfg["n_frames"]),
        size_min=float(cfg["size_min"]),
        size_max=float(cfg["size_max"]),
        motion=synth.MotionModel(
            speed_min=float(cfg["speed_min"]),
            speed_max=float(cfg["speed_max"]),
            heading_noise=float(cfg["heading_noise"]),
        ),
        corruption=synth.CorruptionModel(
            bbox_jitter=float(cfg["bbox_jitter"]),
            keypoint_jitter=float(cfg["keypoint_jitter"]),
            false_positive_rate=float(cfg["false_positive_rate"]),
            miss_rate=float(cfg["miss_rate"]),
        ),
        video_id=str(cfg["video_id"]),
        occluded_ear_size=float(cfg["occluded_ear_size"]),
        separate_territories=bool(cfg["separate_territories"]),
    )
    out = synth.generate(scenario)
    outdir = Path(args.out_dir)
    prov = _provenance(cfg, {})
    save_annotations(out.dataset, outdir / "annotations.json", info=prov)
    save_predictions(out.predictions, out.dataset, outdir / "predictions.json", info=prov)
    _write_json(
        outdir / "correspondence.json", {**prov, **synth.correspondence_to_obj(out)}
    )
    _write_json(outdir / "scenario.json", {**prov, "scenario": scenario.to_dict()})
    print(
        f"synth: wrote {len(out.dataset.frames)} frames, "
        f"{len(out.predictions)} predictions to {outdir}"
    )
    return EXIT_OK


# ----------------------------------------------------------------- tile


def _tile_frame(fr: FrameRecord, side, overlap, min_visible_fraction):
    grid = framing.build_grid(int(fr.width), int(fr.height), side, overlap)
    records = []
    index = []
    for tile in grid.tiles:
        rec = framing.project_to_tile(tile, fr, min_visible_fraction)
        suffix = f"#r{tile.row:02d}c{tile.col:02d}"
        instances = tuple(replace(inst, id=j) for j, inst in enumerate(rec.instances))
        records.append(
            FrameRecord(
                video_id=fr.video_id + suffix,
                frame_index=fr.frame_index,
                width=rec.width,
                height=rec.height,
                instances=instances,
                file_name=(fr.file_name or f"{fr.video_id}/{fr.frame_index:06d}") + suffix,
            )
        )
        index.append(
            {"row": tile.row, "col": tile.col, "x0": tile.x0, "y0": tile.y0, "side": tile.side}
        )
    return records, index


def cmd_tile(args) -> int:
    cfg = _resolve_config("tile", args)
    ds = load_annotations(args.ann)
    prov = _provenance(cfg, {"annotations": ds.provenance})
    side = int(cfg["side"])
    overlap = float(cfg["overlap"])
    mvf = float(cfg["min_visible_fraction"])

    results = _pool_map(lambda fr: _tile_frame(fr, side, overlap, mvf), ds.frames)
    tiled_frames = [rec for records, _ in results for rec in records]
    index = {
        f"{fr.video_id}/{fr.frame_index}": idx
        for fr, (_, idx) in zip(ds.frames, results)
    }
    tiled = Dataset(frames=tuple(tiled_frames), skeleton=ds.skeleton)
    save_annotations(tiled, args.out, info=prov)
    index_out = args.index_out or (str(args.out) + ".tiles.json")
    _write_json(index_out, {**prov, "tiles": index})
    print(
        f"tile: {len(ds.frames)} frames -> {len(tiled_frames)} tile records "
        f"({args.out}); index: {index_out}"
    )
    return EXIT_OK


# ---------------------------------------------------------------- patch


def cmd_patch(args) -> int:
    cfg = _resolve_config("patch", args)
    ds = load_annotations(args.ann)
    inputs = {"annotations": ds.provenance}
    margin = float(cfg["margin"])
    out_size = int(cfg["out_size"])

    items = []
    if args.pred:
        ps = load_predictions(args.pred, ds)
        inputs["predictions"] = ps.provenance
        for video_id, frame_index, inst in ps.entries:
            items.append((video_id, frame_index, inst))
    else:
        for fr in ds.frames:
            for inst in fr.instances:
                items.append((fr.video_id, fr.frame_index, inst))

    patches = []
    for video_id, frame_index, inst in sorted(items, key=lambda t: (t[0], t[1], t[2].id)):
        spec = framing.build_patch(inst.bbox, margin=margin, out_size=out_size)
        patches.append(
            {
                "video_id": video_id,
                "frame_index": frame_index,
                "instance_id": inst.id,
                "source": inst.source.value,
                "bbox": [round6(v) for v in (inst.bbox.x, inst.bbox.y, inst.bbox.w, inst.bbox.h)],
                "cx": round6(spec.cx),
                "cy": round6(spec.cy),
                "side": round6(spec.side),
                "out_size": spec.out_size,
                "scale": round6(spec.map.scale),
                "dx": round6(spec.map.dx),
                "dy": round6(spec.map.dy),
            }
        )
    _write_json(args.out, {**_provenance(cfg, inputs), "patches": patches})
    print(f"patch: wrote {len(patches)} patch records to {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------- eval


def _sweep_thresholds(start: float, stop: float, step: float) -> tuple:
    if step <= 0:
        raise ValueError(f"sweep step must be positive, got {step}")
    ts = []
    k = 0
    while True:
        t = start + step * k
        if t > stop + 1e-9:
            break
        ts.append(round(t, 10))
        k += 1
    return tuple(ts)


def cmd_eval(args) -> int:
    cfg = _resolve_config("eval", args)
    ds = load_annotations(args.ann)
    ps = load_predictions(args.pred, ds)
    eval_config = evaluation.EvalConfig(
        nms_iou=float(cfg["nms_iou"]),
        match_iou=float(cfg["match_iou"]),
        pck_alpha=float(cfg["pck_alpha"]),
        oks_falloff=float(cfg["oks_falloff"]),
        sweep_thresholds=_sweep_thresholds(
            float(cfg["sweep_start"]), float(cfg["sweep_stop"]), float(cfg["sweep_step"])
        ),
        weighted_average=bool(cfg["weighted_average"]),
        include_occluded=bool(cfg["include_occluded"]),
    )
    report = evaluation.evaluate(ds, ps, eval_config)
    prov = _provenance(
        cfg, {"annotations": ds.provenance, "predictions": ps.provenance}
    )
    _write_json(args.out_json, {**prov, **evaluation.report_to_dict(report)})
    csv_text = (
        f"# config: {json.dumps(cfg, sort_keys=True)}\n"
        f"# inputs: {json.dumps(prov['inputs'], sort_keys=True)}\n"
        + evaluation.report_to_csv(report)
    )
    atomic_write_text(args.out_csv, csv_text)
    sys.stdout.write(evaluation.render_text(report))
    print(f"eval: wrote {args.out_json} and {args.out_csv}")
    return EXIT_OK


# ---------------------------------------------------------------- track


def _segment_obj(video_id: str, seg: tracking.TrackSegment) -> dict:
    return {
        "type": "track",
        "video_id": video_id,
        "track_id": seg.track_id,
        "first_frame": seg.first_frame,
        "last_frame": seg.last_frame,
        "n_detections": len(seg.entries),
        "entries": [
            {
                "frame_index": e.frame_index,
                "bbox": [round6(v) for v in (e.bbox.x, e.bbox.y, e.bbox.w, e.bbox.h)],
                "patch": {
                    "cx": round6(e.patch.cx),
                    "cy": round6(e.patch.cy),
                    "side": round6(e.patch.side),
                    "out_size": e.patch.out_size,
                    "scale": round6(e.patch.map.scale),
                    "dx": round6(e.patch.map.dx),
                    "dy": round6(e.patch.map.dy),
                },
            }
            for e in seg.entries
        ],
    }


def cmd_track(args) -> int:
    cfg = _resolve_config("track", args)
    ds = load_annotations(args.ann)
    ps = load_predictions(args.pred, ds)
    prov = _provenance(cfg, {"annotations": ds.provenance, "predictions": ps.provenance})

    tracker_cfg = tracking.TrackerConfig(
        iou_gate=float(cfg["iou_gate"]),
        confirm_hits=int(cfg["confirm_hits"]),
        max_age=int(cfg["max_age"]),
        min_size=float(cfg["min_size"]),
    )
    by_frame = ps.by_frame()
    manifests = []
    track_ids: dict = {}
    kept_entries = []
    for video_id in ds.videos():
        tracker = tracking.Tracker(tracker_cfg)
        for fr in ds.frames_of(video_id):
            dets = evaluation.nms(
                by_frame.get(fr.key, []), iou_threshold=float(cfg["nms_iou"])
            )
            kept_entries.extend((video_id, fr.frame_index, d) for d in dets)
            tracker.step(fr.frame_index, dets)
        manifests.append(
            tracking.export_manifest(
                tracker,
                video_id,
                margin=float(cfg["patch_margin"]),
                out_size=int(cfg["patch_out_size"]),
            )
        )
        for t in tracker.tracks:
            for h in t.history:
                if h.instance_id is not None:
                    track_ids[(video_id, h.frame_index, h.instance_id)] = t.track_id

    lines = [json.dumps({"type": "meta", **prov}, sort_keys=True)]
    n_tracks = 0
    for manifest in manifests:
        for seg in manifest.segments:
            obj = _segment_obj(manifest.video_id, seg)
            lines.append(json.dumps(obj, sort_keys=True))
            n_tracks += 1
    atomic_write_text(args.out_manifest, "\n".join(lines) + "\n")

    kept = PredictionSet(entries=tuple(kept_entries))
    save_predictions(kept, ds, args.out_pred, info=prov, track_ids=track_ids)
    print(
        f"track: {n_tracks} segment(s) -> {args.out_manifest}; "
        f"annotated detections -> {args.out_pred}"
    )
    return EXIT_OK


# -------------------------------------------------------------- overlay


def _load_track_ids(path) -> dict:
    """Pull optional track_id fields out of a (possibly wrapped) prediction
    file; keys are (image_id, per-frame ordinal)."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, dict) and "predictions" in data:
        data = data["predictions"]
    ids: dict = {}
    counters: dict = {}
    for e in data:
        image_id = e.get("image_id")
        ordinal = counters.get(image_id, 0)
        counters[image_id] = ordinal + 1
        if e.get("track_id") is not None:
            ids[(image_id, ordinal)] = int(e["track_id"])
    return ids


def cmd_overlay(args) -> int:
    cfg = _resolve_config("overlay", args)
    ds = load_annotations(args.ann)
    inputs = {"annotations": ds.provenance}
    preds_by_frame: dict = {}
    raw_track_ids: dict = {}
    if args.pred:
        ps = load_predictions(args.pred, ds)
        inputs["predictions"] = ps.provenance
        preds_by_frame = ps.by_frame()
        raw_track_ids = _load_track_ids(args.pred)
    prov = _provenance(cfg, inputs)
    key_by_frame = {key: image_id for image_id, key in ds.image_index.items()}

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    draw_gt = bool(cfg["draw_gt"])

    def render(fr: FrameRecord):
        instances = list(fr.instances) if draw_gt else []
        offset = max((inst.id for inst in instances), default=-1) + 1
        track_ids = {}
        image_id = key_by_frame.get(fr.key)
        for inst in preds_by_frame.get(fr.key, []):
            new_id = offset + inst.id
            instances.append(replace(inst, id=new_id))
            tid = raw_track_ids.get((image_id, inst.id))
            if tid is not None:
                track_ids[new_id] = tid
        combined = FrameRecord(
            video_id=fr.video_id,
            frame_index=fr.frame_index,
            width=fr.width,
            height=fr.height,
            instances=tuple(instances),
            file_name=fr.file_name,
        )
        name = f"{_safe_name(fr.video_id)}_{fr.frame_index:06d}.svg"
        overlay.emit_overlay(
            combined, out_dir / name, ds.skeleton, track_ids or None, meta=prov
        )
        return name

    names = _pool_map(render, ds.frames)
    print(f"overlay: wrote {len(names)} SVG file(s) to {out_dir}")
    return EXIT_OK


# --------------------------------------------------------------- parser


def _add_config_flag(p) -> None:
    p.add_argument("--config", help="JSON config file (flags take precedence)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="herdpose",
        description="Batch toolkit for aerial multi-animal pose data: tiling, "
        "patch geometry, detection/pose metrics, and track extraction.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version="herdpose 0.1.0")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate a synthetic annotated scenario")
    _add_config_flag(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-animals", type=int, dest="n_animals")
    p.add_argument("--n-frames", type=int, dest="n_frames")
    p.add_argument("--frame-width", type=int, dest="frame_width")
    p.add_argument("--frame-height", type=int, dest="frame_height")
    p.add_argument("--size-min", type=float, dest="size_min")
    p.add_argument("--size-max", type=float, dest="size_max")
    p.add_argument("--speed-min", type=float, dest="speed_min")
    p.add_argument("--speed-max", type=float, dest="speed_max")
    p.add_argument("--heading-noise", type=float, dest="heading_noise")
    p.add_argument("--bbox-jitter", type=float, dest="bbox_jitter")
    p.add_argument("--keypoint-jitter", type=float, dest="keypoint_jitter")
    p.add_argument("--false-positive-rate", type=float, dest="false_positive_rate")
    p.add_argument("--miss-rate", type=float, dest="miss_rate")
    p.add_argument("--video-id", dest="video_id")
    p.add_argument("--occluded-ear-size", type=float, dest="occluded_ear_size")
    p.add_argument(
        "--separate-territories",
        action=argparse.BooleanOptionalAction,
        dest="separate_territories",
        default=None,
    )
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tile", help="tile an annotation file into windows")
    _add_config_flag(p)
    p.add_argument("--ann", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--index-out", dest="index_out")
    p.add_argument("--side", type=int)
    p.add_argument("--overlap", type=float)
    p.add_argument("--min-visible-fraction", type=float, dest="min_visible_fraction")
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("patch", help="emit square patch geometry per instance")
    _add_config_flag(p)
    p.add_argument("--ann", required=True)
    p.add_argument("--pred", help="use predictions instead of ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--margin", type=float)
    p.add_argument("--out-size", type=int, dest="out_size")
    p.set_defaults(func=cmd_patch)

    p = sub.add_parser("eval", help="detection mAP and keypoint RMSE/PCK/OKS")
    _add_config_flag(p)
    p.add_argument("--ann", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out-json", dest="out_json", default="eval_report.json")
    p.add_argument("--out-csv", dest="out_csv", default="eval_report.csv")
    p.add_argument("--nms-iou", type=float, dest="nms_iou")
    p.add_argument("--match-iou", type=float, dest="match_iou")
    p.add_argument("--pck-alpha", type=float, dest="pck_alpha")
    p.add_argument("--oks-falloff", type=float, dest="oks_falloff")
    p.add_argument("--sweep-start", type=float, dest="sweep_start")
    p.add_argument("--sweep-stop", type=float, dest="sweep_stop")
    p.add_argument("--sweep-step", type=float, dest="sweep_step")
    p.add_argument(
        "--weighted-average",
        action=argparse.BooleanOptionalAction,
        dest="weighted_average",
        default=None,
    )
    p.add_argument(
        "--include-occluded",
        action=argparse.BooleanOptionalAction,
        dest="include_occluded",
        default=None,
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("track", help="extract per-individual track segments")
    _add_config_flag(p)
    p.add_argument("--ann", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out-manifest", dest="out_manifest", required=True)
    p.add_argument("--out-pred", dest="out_pred", required=True)
    p.add_argument("--nms-iou", type=float, dest="nms_iou")
    p.add_argument("--iou-gate", type=float, dest="iou_gate")
    p.add_argument("--confirm-hits", type=int, dest="confirm_hits")
    p.add_argument("--max-age", type=int, dest="max_age")
    p.add_argument("--min-size", type=float, dest="min_size")
    p.add_argument("--patch-margin", type=float, dest="patch_margin")
    p.add_argument("--patch-out-size", type=int, dest="patch_out_size")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("overlay", help="emit per-frame SVG overlays")
    _add_config_flag(p)
    p.add_argument("--ann", required=True)
    p.add_argument("--pred")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument(
        "--draw-gt",
        action=argparse.BooleanOptionalAction,
        dest="draw_gt",
        default=None,
    )
    p.set_defaults(func=cmd_overlay)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    if not getattr(args, "command", None):
        parser.print_help()
        return EXIT_USAGE
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"herdpose: missing file: {e}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except (IngestError, ValueError) as e:
        print(f"herdpose: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    except Exception as e:  # pragma: no cover - defensive
        print(f"herdpose: internal error: {e}", file=sys.stderr)
        return EXIT_FAILURE

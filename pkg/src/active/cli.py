"""Command-line entry point: ``active <subcommand> [options]``.

Exit codes: 0 success, 2 bad input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .bench import bench
from .ccfpn import ccfpn_graph_dump
from .config import ConfigError, RunConfig
from .evaluation import ap50_report
from .head import kmeans_anchors
from .loss import GroundTruth
from .model import ActiveModel
from .synth import synth_generate
from .tensor import NumericalError, ShapeError
from .tracking import build_tracks, error_rates, motility_report
from .train import Dataset, train

logger = logging.getLogger("active")

EXIT_OK, EXIT_BAD_INPUT, EXIT_NUMERICAL = 0, 2, 3
CHECKPOINT = "model.ckpt"
MODEL_CONFIG = "config.json"
MIN_BOXES_FOR_KMEANS = 9


class UsageError(ValueError):
    pass


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_model(directory) -> tuple[ActiveModel, RunConfig]:
    directory = Path(directory)
    cfg = RunConfig.load(directory / MODEL_CONFIG)
    model = ActiveModel(cfg.model, seed=cfg.seed)
    model.load_state_dict(io.load_checkpoint(directory / CHECKPOINT))
    return model, cfg


def _require(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required")
    return value


def _images(frames_dir, image_size: int) -> np.ndarray:
    frames = io.load_video(frames_dir)
    if frames.shape[1:] != (image_size, image_size):
        raise UsageError(f"frames are {frames.shape[1:]}, the model expects {image_size}x{image_size}")
    return io.frames_to_images(frames)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg: RunConfig, out: Path) -> None:
    spec = cfg.synth
    spec.seed = cfg.seed
    video = synth_generate(spec)
    io.save_video(out / "frames", video.frames)
    io.save_annotations(out / "annotations.jsonl",
                        {t: [GroundTruth(cx, cy, w, h, c) for c, cx, cy, w, h in boxes]
                         for t, boxes in enumerate(video.annotations)})
    with open(out / "tracks_gt.jsonl", "w", encoding="utf-8") as fh:
        for tr in video.tracks:
            fh.write(json.dumps(tr) + "\n")
    print(f"wrote {spec.n_frames} frames to {out}")


def cmd_train(args, cfg: RunConfig, out: Path) -> None:
    frames = _require(args.frames or cfg.data.frames, "--frames")
    ann = _require(args.annotations or cfg.data.annotations, "--annotations")
    size = cfg.model.image_size
    images = _images(frames, size)
    by_image = io.load_annotations(ann, image_size=size)
    boxes = [by_image.get(i, []) for i in range(len(images))]
    extra = sorted(set(by_image) - set(range(len(images))))
    if extra:
        raise UsageError(f"annotations reference images {extra[:5]} beyond the {len(images)} frames")
    wh = np.array([[g.w, g.h] for bs in boxes for g in bs]).reshape(-1, 2)
    if len(wh) >= MIN_BOXES_FOR_KMEANS:
        cfg.model.anchors = kmeans_anchors(wh, seed=cfg.seed).tolist()
    cfg.train.seed = cfg.seed
    model = ActiveModel(cfg.model, seed=cfg.seed)
    result = train(Dataset(images, boxes), model, cfg.train)
    io.save_checkpoint(out / CHECKPOINT, model.state_dict())
    cfg.save(out / MODEL_CONFIG)
    io.write_loss_csv(out / "loss.csv", result.log)
    final = result.log[-1]["total"] if result.log else float("nan")
    print(f"trained {len(result.log)} epochs, final loss {final:.4f}; model in {out}")


def cmd_detect(args, cfg: RunConfig, out: Path) -> None:
    model, mcfg = _load_model(_require(args.model, "--model"))
    frames = _require(args.frames or cfg.data.frames, "--frames")
    images = _images(frames, mcfg.model.image_size)
    dets = {}
    for t in range(len(images)):
        found = model.detect(images[t : t + 1], args.conf_thresh, args.diou_thresh)[0]
        for d in found:
            d.frame = t
        dets[t] = found
    io.save_detections(out / "detections.jsonl", dets)
    print(f"{sum(len(v) for v in dets.values())} detections in {len(images)} frames")


def cmd_eval(args, cfg: RunConfig, out: Path) -> None:
    dets = io.load_detections(_require(args.detections, "--detections"))
    gts = io.load_annotations(_require(args.annotations or cfg.data.annotations, "--annotations"))
    report = ap50_report(dets, gts)
    _write_json(out / "eval.json", report.to_dict())
    io.write_ap_csv(out / "ap.csv", report.ap_table())
    for name, ap in report.ap_table():
        print(f"AP50 {name}: {'n/a' if ap is None else f'{ap:.4f}'}")


def cmd_track(args, cfg: RunConfig, out: Path) -> None:
    dets = io.load_detections(_require(args.detections, "--detections"))
    n = max(dets, default=-1) + 1
    frames = [dets.get(t, []) for t in range(n)]
    t = cfg.track
    tracks = build_tracks(frames, t.gate_px, t.max_gap, t.min_len)
    io.save_tracks(out / "tracks.jsonl", tracks)
    print(f"{len(tracks)} tracks")


def cmd_motility(args, cfg: RunConfig, out: Path) -> None:
    t = cfg.track
    fps = _require(args.fps if args.fps is not None else t.fps, "--fps")
    um = _require(args.um_per_px if args.um_per_px is not None else t.um_per_px, "--um-per-px")
    if fps <= 0 or um <= 0:
        raise UsageError("--fps and --um-per-px must be positive")
    tracks = io.load_tracks(_require(args.tracks, "--tracks"))
    report = motility_report(tracks, fps, um, t.smooth_w)
    io.write_motility_csv(out / "motility.csv", report)
    summary = {"means": report.means}
    if args.reference:
        ref = motility_report(io.load_tracks(args.reference), fps, um, t.smooth_w)
        summary["error_percent"] = error_rates(report, ref)
    _write_json(out / "motility_summary.json", summary)
    print(json.dumps(summary, sort_keys=True))


def cmd_graph(args, cfg: RunConfig, out: Path | None) -> None:
    variant = args.variant if args.variant is not None else cfg.model.variant
    text = ccfpn_graph_dump(variant, cfg.model.eq3_literal)
    if out is not None:
        (out / "graph.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_bench(args, cfg: RunConfig, out: Path) -> None:
    if args.model:
        model, mcfg = _load_model(args.model)
    else:
        mcfg = cfg
        model = ActiveModel(cfg.model, seed=cfg.seed)
    size = mcfg.model.image_size
    if args.frames:
        images = _images(args.frames, size)
    else:
        images = np.random.default_rng(cfg.seed).random((1, 3, size, size)).astype(np.float32)
    result = bench(model, images, args.n_images, mcfg.digest())
    _write_json(out / "bench.json", result.to_dict())
    print(f"{result.fps:.3f} FPS over {result.n_images} images (config {result.config_hash})")


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "detect": cmd_detect, "eval": cmd_eval,
    "track": cmd_track, "motility": cmd_motility, "graph": cmd_graph, "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults when omitted)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory (created if missing)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="active", description="Sperm and impurity detection, tracking and motility.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic video with annotations")
    s = sub.add_parser("train", parents=[common], help="train a detector")
    s.add_argument("--frames", help="frame directory (manifest.json + PGM files)")
    s.add_argument("--annotations", help="annotation JSON lines")
    s = sub.add_parser("detect", parents=[common], help="run a trained detector over frames")
    s.add_argument("--model", help="directory written by 'train'")
    s.add_argument("--frames")
    s.add_argument("--conf-thresh", type=float)
    s.add_argument("--diou-thresh", type=float)
    s = sub.add_parser("eval", parents=[common], help="AP50 of detections against annotations")
    s.add_argument("--detections")
    s.add_argument("--annotations")
    s = sub.add_parser("track", parents=[common], help="link detections into tracks")
    s.add_argument("--detections")
    s = sub.add_parser("motility", parents=[common], help="VSL, VCL and VAP per track")
    s.add_argument("--tracks")
    s.add_argument("--reference", help="reference tracks for error rates")
    s.add_argument("--fps", type=float)
    s.add_argument("--um-per-px", type=float)
    s = sub.add_parser("graph", parents=[common], help="print a fusion graph")
    s.add_argument("--variant", help="1-4 or I-IV")
    s = sub.add_parser("bench", parents=[common], help="frames per second of the detect pipeline")
    s.add_argument("--model")
    s.add_argument("--frames")
    s.add_argument("--n-images", type=int, default=10)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_BAD_INPUT
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        out = Path(args.out) if args.out else None
        if out is None and args.command != "graph":
            out = Path(".")
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out)
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ConfigError, io.FormatError, ShapeError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

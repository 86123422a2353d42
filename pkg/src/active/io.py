"""File formats: JSON-lines annotations/detections/tracks, CSV reports, PGM frames, checkpoints."""

from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .head import NUM_CLASSES, Detection
from .loss import GroundTruth
from .tracking import METRICS, MotilityReport, Track

CHECKPOINT_MAGIC = b"ACTV"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """A file violates its format contract; the message names the line and field."""

    def __init__(self, path, line: int, field: str, message: str):
        super().__init__(f"{path}:{line}: field {field!r}: {message}")
        self.path, self.line, self.field = str(path), line, field


def _json_lines(path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(path, lineno, "<json>", str(exc)) from None
            if not isinstance(obj, dict):
                raise FormatError(path, lineno, "<json>", "expected an object")
            yield lineno, obj


def _number(path, lineno, obj, key, integer=False):
    if key not in obj:
        raise FormatError(path, lineno, key, "missing")
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise FormatError(path, lineno, key, f"expected a number, got {v!r}")
    if integer and (not isinstance(v, int)):
        raise FormatError(path, lineno, key, f"expected an integer, got {v!r}")
    if not math.isfinite(v):
        raise FormatError(path, lineno, key, "not finite")
    return v


def _box_fields(path, lineno, obj, image_size):
    cls = _number(path, lineno, obj, "class_id", integer=True)
    if not 0 <= cls < NUM_CLASSES:
        raise FormatError(path, lineno, "class_id", f"must be in [0, {NUM_CLASSES}), got {cls}")
    cx, cy, w, h = (float(_number(path, lineno, obj, k)) for k in ("cx", "cy", "w", "h"))
    for key, v in (("w", w), ("h", h)):
        if v <= 0:
            raise FormatError(path, lineno, key, f"must be positive, got {v}")
    if image_size is not None:
        eps = 1e-6
        for key, lo, hi in (("cx", cx - w / 2, cx + w / 2), ("cy", cy - h / 2, cy + h / 2)):
            if lo < -eps or hi > image_size + eps:
                raise FormatError(path, lineno, key, f"box extends outside the {image_size}px image")
    return cls, cx, cy, w, h


def load_annotations(path, image_size: float | None = None) -> dict[int, list[GroundTruth]]:
    """``{image, class_id, cx, cy, w, h}`` lines -> boxes grouped by image id."""
    out: dict[int, list[GroundTruth]] = {}
    for lineno, obj in _json_lines(path):
        img = _number(path, lineno, obj, "image", integer=True)
        cls, cx, cy, w, h = _box_fields(path, lineno, obj, image_size)
        out.setdefault(img, []).append(GroundTruth(cx, cy, w, h, cls))
    return out


def save_annotations(path, boxes_by_image: dict[int, list]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for img in sorted(boxes_by_image):
            for g in boxes_by_image[img]:
                fh.write(json.dumps({"image": int(img), "class_id": int(g.class_id), "cx": float(g.cx),
                                     "cy": float(g.cy), "w": float(g.w), "h": float(g.h)}) + "\n")


def save_detections(path, dets_by_frame: dict[int, list[Detection]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for frame in sorted(dets_by_frame):
            for d in dets_by_frame[frame]:
                fh.write(json.dumps({"frame": int(frame), "class_id": int(d.class_id), "cx": float(d.cx),
                                     "cy": float(d.cy), "w": float(d.w), "h": float(d.h),
                                     "conf": float(d.confidence)}) + "\n")


def load_detections(path, image_size: float | None = None) -> dict[int, list[Detection]]:
    out: dict[int, list[Detection]] = {}
    for lineno, obj in _json_lines(path):
        frame = _number(path, lineno, obj, "frame", integer=True)
        cls, cx, cy, w, h = _box_fields(path, lineno, obj, image_size)
        conf = float(_number(path, lineno, obj, "conf"))
        if not 0.0 <= conf <= 1.0:
            raise FormatError(path, lineno, "conf", f"must lie in [0, 1], got {conf}")
        out.setdefault(frame, []).append(Detection(cx, cy, w, h, conf, class_id=cls, frame=frame))
    return out


def save_tracks(path, tracks: Iterable[Track]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tr in tracks:
            fh.write(json.dumps(tr.to_dict()) + "\n")


def load_tracks(path) -> list[Track]:
    out = []
    for lineno, obj in _json_lines(path):
        tid = _number(path, lineno, obj, "track_id", integer=True)
        cls = _number(path, lineno, obj, "class_id", integer=True)
        pts = obj.get("points")
        if not isinstance(pts, list):
            raise FormatError(path, lineno, "points", "expected a list of [frame, cx, cy]")
        points = []
        last = None
        for p in pts:
            if not (isinstance(p, list) and len(p) == 3 and isinstance(p[0], int)):
                raise FormatError(path, lineno, "points", f"bad point {p!r}")
            if last is not None and p[0] <= last:
                raise FormatError(path, lineno, "points", "frame indices must be strictly increasing")
            last = p[0]
            points.append((int(p[0]), float(p[1]), float(p[2])))
        out.append(Track(tid, cls, points))
    return out


def write_motility_csv(path, report: MotilityReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["track_id", *METRICS])
        for tid in sorted(report.per_track):
            w.writerow([tid, *(repr(float(v)) for v in report.per_track[tid])])


def read_motility_csv(path) -> MotilityReport:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return MotilityReport({int(r["track_id"]): tuple(float(r[m]) for m in METRICS) for r in rows})


def write_loss_csv(path, rows: list[dict]) -> None:
    cols = ["epoch", "phase", "loc_loss", "conf_loss", "cls_loss", "total"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r["epoch"], r["phase"], *(repr(float(r[c])) for c in cols[2:])])


def write_ap_csv(path, table: list[tuple[str, float | None]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "ap"])
        for name, ap in table:
            w.writerow([name, "" if ap is None else repr(float(ap))])


# ---------------------------------------------------------------------------
# frames


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("PGM frames must be 2-D uint8 arrays")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM file")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    return np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos).reshape(height, width).copy()


# ---------------------------------------------------------------------------
# checkpoints


def _as4(shape: tuple[int, ...]) -> tuple[int, int, int, int]:
    if len(shape) > 4:
        raise ValueError(f"cannot store a {len(shape)}-D parameter")
    return tuple(shape) + (1,) * (4 - len(shape))


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    """Little-endian: magic, version, count, then (name, 4 extents, float32 data) per parameter."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, arr in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<4I", *_as4(np.shape(arr))))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        shape = struct.unpack_from("<4I", data, pos)
        pos += 16
        size = int(np.prod(shape))
        out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return out


# ---------------------------------------------------------------------------
# videos: a directory of numbered frames plus a manifest

MANIFEST = "manifest.json"


def save_video(directory, frames: np.ndarray) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for t, img in enumerate(frames):
        name = f"frame_{t:05d}.pgm"
        write_pgm(directory / name, img)
        names.append(name)
    h, w = (frames.shape[1], frames.shape[2]) if len(frames) else (0, 0)
    manifest = {"n_frames": len(names), "height": int(h), "width": int(w), "frames": names}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def load_video(directory) -> np.ndarray:
    """Frames as a ``(T, H, W)`` uint8 array, in manifest order."""
    directory = Path(directory)
    path = directory / MANIFEST
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(path, exc.lineno, "<json>", str(exc)) from None
    names = manifest.get("frames")
    if not isinstance(names, list):
        raise FormatError(path, 1, "frames", "expected a list of file names")
    frames = [read_pgm(directory / n) for n in names]
    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        raise FormatError(path, 1, "frames", f"frames differ in size: {sorted(shapes)}")
    if not frames:
        return np.zeros((0, manifest.get("height", 0), manifest.get("width", 0)), dtype=np.uint8)
    return np.stack(frames)


def frames_to_images(frames: np.ndarray, dtype=np.float32) -> np.ndarray:
    """``(T, H, W)`` uint8 -> ``(T, 3, H, W)`` in ``[0, 1]``, grey replicated to three channels."""
    x = frames.astype(dtype) / 255.0
    return np.repeat(x[:, None], 3, axis=1)

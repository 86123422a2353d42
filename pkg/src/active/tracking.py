"""Adjacent-frame nearest-neighbour tracking and CASA motility parameters (VSL, VCL, VAP)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_GATE_PX = 30.0
DEFAULT_MAX_GAP = 2
DEFAULT_MIN_LEN = 5
DEFAULT_SMOOTH_W = 5


@dataclass
class Track:
    track_id: int
    class_id: int
    points: list[tuple[int, float, float]] = field(default_factory=list)  # (frame, cx, cy)

    @property
    def last_frame(self) -> int:
        return self.points[-1][0]

    def to_dict(self) -> dict:
        return {"track_id": self.track_id, "class_id": self.class_id,
                "points": [[int(f), float(x), float(y)] for f, x, y in self.points]}


def _xyc(d):
    if hasattr(d, "cx"):
        return d.cx, d.cy, getattr(d, "class_id", 0)
    x, y = d[0], d[1]
    return x, y, (d[2] if len(d) > 2 else 0)


def match_adjacent(dets_t: Sequence, dets_t1: Sequence, gate_px: float = DEFAULT_GATE_PX) -> list[tuple[int, int]]:
    """Greedy globally-nearest one-to-one matching of same-class detections.

    Repeatedly takes the closest unmatched pair within ``gate_px``; ties go to
    the lower index in ``dets_t`` and then in ``dets_t1``. Pairs come back in
    the order they were taken.
    """
    if not dets_t or not dets_t1:
        return []
    a = np.array([_xyc(d) for d in dets_t], dtype=np.float64)
    b = np.array([_xyc(d) for d in dets_t1], dtype=np.float64)
    dx = a[:, None, 0] - b[None, :, 0]
    dy = a[:, None, 1] - b[None, :, 1]
    d2 = dx * dx + dy * dy
    ok = (d2 <= gate_px * gate_px) & (a[:, None, 2] == b[None, :, 2])
    ii, jj = np.nonzero(ok)
    order = np.lexsort((jj, ii, d2[ii, jj]))
    used_a, used_b = set(), set()
    pairs = []
    for i, j in zip(ii[order].tolist(), jj[order].tolist()):
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    return pairs


def build_tracks(frames: Sequence[Sequence], gate_px: float = DEFAULT_GATE_PX, max_gap: int = DEFAULT_MAX_GAP,
                 min_len: int = DEFAULT_MIN_LEN) -> list[Track]:
    """Chain per-frame detections into tracks.

    ``frames[t]`` lists the detections of frame ``t``. A track stays open while it
    has missed at most ``max_gap`` consecutive frames; at each frame the open
    tracks' last points are matched to the new detections with
    :func:`match_adjacent`, and unmatched detections start new tracks. Tracks
    with fewer than ``min_len`` points are dropped; survivors are numbered in
    creation order.
    """
    tracks: list[Track] = []
    for t, dets in enumerate(frames):
        pts = [_xyc(d) for d in dets]
        open_tracks = [tr for tr in tracks if t - tr.last_frame - 1 <= max_gap]
        heads = [(tr.points[-1][1], tr.points[-1][2], tr.class_id) for tr in open_tracks]
        taken = set()
        for i, j in match_adjacent(heads, pts, gate_px):
            open_tracks[i].points.append((t, float(pts[j][0]), float(pts[j][1])))
            taken.add(j)
        for j, p in enumerate(pts):
            if j not in taken:
                tracks.append(Track(len(tracks), int(p[2]), [(t, float(p[0]), float(p[1]))]))
    kept = [tr for tr in tracks if len(tr.points) >= min_len]
    for new_id, tr in enumerate(kept):
        tr.track_id = new_id
    return kept


def smooth_path(points: np.ndarray, window: int = DEFAULT_SMOOTH_W) -> np.ndarray:
    """Centred moving average whose half-width shrinks near the ends, so endpoints stay fixed."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"smoothing window must be a positive odd integer, got {window}")
    n = len(points)
    half = window // 2
    out = np.empty_like(points, dtype=np.float64)
    for i in range(n):
        r = min(half, i, n - 1 - i)
        out[i] = points[i - r : i + r + 1].mean(axis=0)
    return out


def _path_length(p: np.ndarray) -> float:
    return float(np.sqrt(((p[1:] - p[:-1]) ** 2).sum(axis=1)).sum())


def motility(track: Track, fps: float, um_per_px: float,
             smooth_w: int = DEFAULT_SMOOTH_W) -> tuple[float, float, float] | None:
    """``(VSL, VCL, VAP)`` in micrometres per second, or ``None`` for tracks that are too short."""
    if fps <= 0 or um_per_px <= 0:
        raise ValueError("fps and um_per_px must be positive")
    if len(track.points) < 2:
        return None
    duration = (track.points[-1][0] - track.points[0][0]) / fps
    if duration <= 0:
        return None
    p = np.array([[x, y] for _, x, y in track.points], dtype=np.float64)
    vsl = math.hypot(*(p[-1] - p[0])) / duration
    vcl = _path_length(p) / duration
    vap = _path_length(smooth_path(p, smooth_w)) / duration
    return vsl * um_per_px, vcl * um_per_px, vap * um_per_px


METRICS = ("vsl", "vcl", "vap")


@dataclass
class MotilityReport:
    per_track: dict[int, tuple[float, float, float]]

    @property
    def means(self) -> dict[str, float | None]:
        if not self.per_track:
            return {m: None for m in METRICS}
        arr = np.array(list(self.per_track.values()))
        return {m: float(arr[:, i].mean()) for i, m in enumerate(METRICS)}


def motility_report(tracks: Sequence[Track], fps: float, um_per_px: float,
                    smooth_w: int = DEFAULT_SMOOTH_W) -> MotilityReport:
    out = {}
    for tr in tracks:
        v = motility(tr, fps, um_per_px, smooth_w)
        if v is not None:
            out[tr.track_id] = v
    return MotilityReport(out)


def error_rates(computed: MotilityReport, reference: MotilityReport) -> dict[str, float | None]:
    """Relative error of the per-video means, in percent; ``None`` when the reference mean is 0 or missing."""
    cm, rm = computed.means, reference.means
    out = {}
    for m in METRICS:
        if rm[m] is None or cm[m] is None or rm[m] == 0:
            out[m] = None
        else:
            out[m] = abs(cm[m] - rm[m]) / rm[m] * 100.0
    return out

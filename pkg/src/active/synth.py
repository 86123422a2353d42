"""Synthetic microscopy videos: moving sperm heads and slow irregular impurities on noise.

Randomness comes from two independent streams so the motion can be replayed
without rendering: ``default_rng([seed, 0])`` drives object placement and motion,
``default_rng([seed, 1])`` drives pixel noise.

Motion stream draw order:

1. per sperm: ``x, y`` (uniform in the margin-inset image), heading (uniform in
   ``[0, 2pi)``), speed (uniform in ``speed_range``), head length (uniform in
   ``sperm_size``);
2. per impurity: ``x, y``, diameter (uniform in ``impurity_size``), drift
   ``vx, vy`` (uniform in ``[-impurity_drift, impurity_drift]``), three lobe
   offsets ``(dx, dy)`` each uniform in ``[-d/4, d/4]``;
3. for every frame after the first, per sperm: one heading increment
   ``normal(0, heading_noise)``.

Positions advance by ``speed * (cos h, sin h)`` (sperm) or ``(vx, vy)``
(impurities) and reflect off the inset borders.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .io import frames_to_images

SPERM, IMPURITY = 0, 1
HEAD_ASPECT = 0.55  # head width / head length


@dataclass
class SynthSpec:
    n_frames: int = 8
    n_sperm: int = 4
    n_impurity: int = 2
    image_size: int = 416
    sperm_size: tuple[float, float] = (24.0, 32.0)
    impurity_size: tuple[float, float] = (28.0, 40.0)
    heading_noise: float = 0.3
    speed_range: tuple[float, float] = (2.0, 6.0)
    impurity_drift: float = 0.3
    noise_level: float = 0.04
    seed: int = 0

    def __post_init__(self):
        self.sperm_size = tuple(float(v) for v in self.sperm_size)
        self.impurity_size = tuple(float(v) for v in self.impurity_size)
        self.speed_range = tuple(float(v) for v in self.speed_range)
        if self.n_frames < 1 or self.n_sperm < 0 or self.n_impurity < 0:
            raise ValueError("n_frames must be positive and object counts non-negative")
        biggest = max(self.sperm_size[1], self.impurity_size[1] * 1.5)
        if biggest >= self.image_size / 2:
            raise ValueError(f"objects of size {biggest} do not fit a {self.image_size}px image")
        for lo, hi in (self.sperm_size, self.impurity_size, self.speed_range):
            if lo > hi or lo < 0:
                raise ValueError("ranges must satisfy 0 <= lo <= hi")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthVideo:
    frames: np.ndarray  # (T, H, W) uint8
    annotations: list[list[tuple[int, float, float, float, float]]]  # per frame: (class, cx, cy, w, h)
    tracks: list[dict] = field(default_factory=list)  # {track_id, class_id, points: [[frame, cx, cy], ...]}

    def images(self, dtype=np.float32) -> np.ndarray:
        """Frames as ``(T, 3, H, W)`` in ``[0, 1]``."""
        return frames_to_images(self.frames, dtype)


def sperm_half_extents(length: float, heading: float) -> tuple[float, float]:
    a, b = length / 2, length * HEAD_ASPECT / 2
    c, s = math.cos(heading), math.sin(heading)
    return math.sqrt((a * c) ** 2 + (b * s) ** 2), math.sqrt((a * s) ** 2 + (b * c) ** 2)


def _reflect(pos: float, vel: float, lo: float, hi: float) -> tuple[float, float]:
    if pos < lo:
        return 2 * lo - pos, -vel
    if pos > hi:
        return 2 * hi - pos, -vel
    return pos, vel


def simulate_motion(spec: SynthSpec) -> tuple[list[dict], list[dict]]:
    """Replay the motion stream; returns per-object state histories (no pixels)."""
    rng = np.random.default_rng([spec.seed, 0])
    size = spec.image_size
    sperm = []
    for _ in range(spec.n_sperm):
        margin = spec.sperm_size[1] / 2 + 1
        x, y = rng.uniform(margin, size - margin, size=2)
        heading = rng.uniform(0, 2 * math.pi)
        speed = rng.uniform(*spec.speed_range)
        length = rng.uniform(*spec.sperm_size)
        sperm.append({"x": [float(x)], "y": [float(y)], "heading": [float(heading)],
                      "speed": float(speed), "length": float(length), "margin": margin})
    impurities = []
    for _ in range(spec.n_impurity):
        margin = spec.impurity_size[1] * 0.75 + 1
        x, y = rng.uniform(margin, size - margin, size=2)
        d = rng.uniform(*spec.impurity_size)
        vx, vy = rng.uniform(-spec.impurity_drift, spec.impurity_drift, size=2)
        lobes = rng.uniform(-d / 4, d / 4, size=(3, 2))
        impurities.append({"x": [float(x)], "y": [float(y)], "d": float(d), "v": [float(vx), float(vy)],
                           "lobes": lobes, "margin": margin})

    for _ in range(1, spec.n_frames):
        for s in sperm:
            h = s["heading"][-1] + rng.normal(0.0, spec.heading_noise)
            vx, vy = s["speed"] * math.cos(h), s["speed"] * math.sin(h)
            x, vx = _reflect(s["x"][-1] + vx, vx, s["margin"], size - s["margin"])
            y, vy = _reflect(s["y"][-1] + vy, vy, s["margin"], size - s["margin"])
            s["x"].append(x)
            s["y"].append(y)
            s["heading"].append(math.atan2(vy, vx))
        for p in impurities:
            vx, vy = p["v"]
            x, vx = _reflect(p["x"][-1] + vx, vx, p["margin"], size - p["margin"])
            y, vy = _reflect(p["y"][-1] + vy, vy, p["margin"], size - p["margin"])
            p["x"].append(x)
            p["y"].append(y)
            p["v"] = [vx, vy]
    return sperm, impurities


def _impurity_geometry(p: dict, t: int):
    """Lobe centres and radius, and the bounding box of their union."""
    r = p["d"] / 3
    cx, cy = p["x"][t], p["y"][t]
    centres = [(cx, cy)] + [(cx + dx, cy + dy) for dx, dy in p["lobes"]]
    x1 = min(c[0] for c in centres) - r
    x2 = max(c[0] for c in centres) + r
    y1 = min(c[1] for c in centres) - r
    y2 = max(c[1] for c in centres) + r
    return centres, r, ((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


def synth_generate(spec: SynthSpec) -> SynthVideo:
    """Render a deterministic synthetic video with annotations and ground-truth tracks."""
    sperm, impurities = simulate_motion(spec)
    noise_rng = np.random.default_rng([spec.seed, 1])
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    frames = np.empty((spec.n_frames, size, size), dtype=np.uint8)
    annotations = []
    tracks = [{"track_id": i, "class_id": SPERM, "points": []} for i in range(len(sperm))]
    tracks += [{"track_id": len(sperm) + i, "class_id": IMPURITY, "points": []} for i in range(len(impurities))]

    for t in range(spec.n_frames):
        img = np.full((size, size), 0.18) + noise_rng.normal(0.0, spec.noise_level, size=(size, size))
        boxes = []
        for p in impurities:
            centres, r, box = _impurity_geometry(p, t)
            mask = np.zeros((size, size), dtype=bool)
            for cx, cy in centres:
                mask |= (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
            img[mask] = 0.5
            boxes.append((IMPURITY, *box))
        for s in sperm:
            cx, cy, h, length = s["x"][t], s["y"][t], s["heading"][t], s["length"]
            a, b = length / 2, length * HEAD_ASPECT / 2
            c, si = math.cos(h), math.sin(h)
            u = (xx - cx) * c + (yy - cy) * si
            v = -(xx - cx) * si + (yy - cy) * c
            # faint tail trailing the head
            tail = (u < -a * 0.8) & (u > -a * 3.0) & (np.abs(v) < 1.0)
            img[tail] = np.maximum(img[tail], 0.4)
            img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] = 0.95
            ex, ey = sperm_half_extents(length, h)
            boxes.append((SPERM, cx, cy, 2 * ex, 2 * ey))
        frames[t] = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
        # sperm first, then impurities, so box order matches track order
        ordered = boxes[len(impurities):] + boxes[: len(impurities)]
        annotations.append([tuple(float(v) if i else int(v) for i, v in enumerate(b)) for b in ordered])
        for tr, b in zip(tracks, ordered):
            tr["points"].append([t, float(b[1]), float(b[2])])
    return SynthVideo(frames, annotations, tracks)

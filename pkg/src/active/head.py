"""Prediction head, box decoding, DIoU and DIoU-based non-maximum suppression."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dbfen import LEVELS
from .nn import Conv, Module, init_weight
from .tensor import Tensor, _sigmoid

NUM_CLASSES = 2
FIELDS = 4 + 1 + NUM_CLASSES  # tx, ty, tw, th, C, P0, P1
ANCHORS_PER_CELL = 3

# YOLOv3 priors at 416 px, ordered by area.
FALLBACK_ANCHORS = (
    (10, 13), (16, 30), (33, 23),
    (30, 61), (62, 45), (59, 119),
    (116, 90), (156, 198), (373, 326),
)

# pixels per cell, level 1 (coarsest) .. 3 (finest)
LEVEL_STRIDE = {1: 32, 2: 16, 3: 8}

# objectness starts at this probability everywhere, so the many negative anchors do
# not swamp the first updates
CONF_PRIOR = 0.01
PREDICT_STD = 0.01

DEFAULT_CONF_THRESH = 0.5
DEFAULT_DIOU_THRESH = 0.45


@dataclass
class Detection:
    cx: float
    cy: float
    w: float
    h: float
    confidence: float
    class_probs: tuple[float, ...] = field(default_factory=lambda: (0.5, 0.5))
    class_id: int = 0
    frame: int = 0

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass(frozen=True)
class AnchorCell:
    cx: int
    cy: int
    pw: float
    ph: float


def anchors_by_level(anchors) -> dict[int, np.ndarray]:
    """Split nine ``(w, h)`` priors by area: largest three to level 1, smallest to level 3."""
    arr = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    if arr.shape[0] != 9:
        raise ValueError(f"expected 9 anchor priors, got {arr.shape[0]}")
    if (arr <= 0).any():
        raise ValueError("anchor priors must be positive")
    order = np.argsort(arr[:, 0] * arr[:, 1], kind="stable")
    arr = arr[order]
    return {1: arr[6:9], 2: arr[3:6], 3: arr[0:3]}


def _wh_iou(wh: np.ndarray, priors: np.ndarray) -> np.ndarray:
    inter = np.minimum(wh[:, None, 0], priors[None, :, 0]) * np.minimum(wh[:, None, 1], priors[None, :, 1])
    union = wh[:, None, 0] * wh[:, None, 1] + priors[None, :, 0] * priors[None, :, 1] - inter
    return inter / union


def kmeans_anchors(wh, k: int = 9, seed: int = 0, iters: int = 100) -> np.ndarray:
    """K-means over box sizes with ``1 - IoU`` distance; result sorted by area.

    Falls back to the YOLOv3 priors when there are fewer distinct boxes than ``k``.
    """
    wh = np.asarray(wh, dtype=np.float64).reshape(-1, 2)
    wh = wh[(wh > 0).all(axis=1)]
    if len(np.unique(wh, axis=0)) < k:
        return np.asarray(FALLBACK_ANCHORS, dtype=np.float64)
    rng = np.random.default_rng(seed)
    # k-means++ seeding under the same distance
    centers = wh[[rng.integers(len(wh))]]
    while len(centers) < k:
        d = np.min(1.0 - _wh_iou(wh, centers), axis=1) ** 2
        centers = np.vstack([centers, wh[rng.choice(len(wh), p=d / d.sum())]])
    for _ in range(iters):
        assign = np.argmax(_wh_iou(wh, centers), axis=1)
        updated = np.array([wh[assign == c].mean(axis=0) if (assign == c).any() else centers[c] for c in range(k)])
        if np.allclose(updated, centers):
            break
        centers = updated
    return centers[np.argsort(centers[:, 0] * centers[:, 1], kind="stable")]


class Head(Module):
    """Per level: 3x3 conv (leaky ReLU) then a 1x1 conv to ``3 * 7`` raw outputs."""

    def __init__(self, width: int, rng: np.random.Generator, dtype=np.float64):
        self.stem = {f"P{k}": Conv(rng, width, width, 3, act="leaky_relu", dtype=dtype) for k in LEVELS}
        self.predict = {
            f"P{k}": Conv(rng, width, ANCHORS_PER_CELL * FIELDS, 1, act="linear", dtype=dtype) for k in LEVELS
        }
        for conv in self.predict.values():
            # small outputs at the start: boxes begin at their priors and centres mid-cell
            conv.weight = init_weight(rng, conv.weight.shape, dtype, std=PREDICT_STD)
            conv.bias.data[4::FIELDS] = np.log(CONF_PRIOR / (1 - CONF_PRIOR))

    def __call__(self, outs: list[Tensor]) -> list[Tensor]:
        return [self.predict[f"P{k}"](self.stem[f"P{k}"](x)) for k, x in zip(LEVELS, outs)]


def split_raw(raw: np.ndarray) -> np.ndarray:
    """``(N, 21, S, S)`` -> ``(N, 3, S, S, 7)``."""
    n, c, s1, s2 = raw.shape
    if c != ANCHORS_PER_CELL * FIELDS:
        raise ValueError(f"raw prediction needs {ANCHORS_PER_CELL * FIELDS} channels, got {c}")
    return raw.reshape(n, ANCHORS_PER_CELL, FIELDS, s1, s2).transpose(0, 1, 3, 4, 2)


def decode_arrays(raw: np.ndarray, priors: np.ndarray, stride: float) -> dict[str, np.ndarray]:
    """Vectorised decode of one level into centre/size/confidence/class arrays of shape (N, 3, S, S)."""
    p = split_raw(np.asarray(raw, dtype=np.float64))
    s_y, s_x = p.shape[2:4]
    cell_x = np.arange(s_x)[None, None, None, :]
    cell_y = np.arange(s_y)[None, None, :, None]
    pw = priors[:, 0][None, :, None, None]
    ph = priors[:, 1][None, :, None, None]
    return {
        "cx": (_sigmoid(p[..., 0]) + cell_x) * stride,
        "cy": (_sigmoid(p[..., 1]) + cell_y) * stride,
        "w": pw * np.exp(p[..., 2]),
        "h": ph * np.exp(p[..., 3]),
        "conf": _sigmoid(p[..., 4]),
        "cls": _sigmoid(p[..., 5:]),
    }


def clip_boxes(cx, cy, w, h, image_size: float):
    x1 = np.clip(cx - w / 2, 0, image_size)
    x2 = np.clip(cx + w / 2, 0, image_size)
    y1 = np.clip(cy - h / 2, 0, image_size)
    y2 = np.clip(cy + h / 2, 0, image_size)
    return (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1


def decode(raw, priors, stride: float, image_size: float | None = None,
           conf_thresh: float = 0.0) -> list[list[Detection]]:
    """Decode one level into per-image detection lists.

    ``b = ((sigmoid(t_xy) + cell) * stride, prior * exp(t_wh))``; confidence and the
    two class probabilities are independent sigmoids. Boxes are clipped to the
    image when ``image_size`` is given; only boxes with confidence >= ``conf_thresh`` are kept.
    """
    raw = raw.data if isinstance(raw, Tensor) else raw
    priors = np.asarray(priors, dtype=np.float64).reshape(ANCHORS_PER_CELL, 2)
    d = decode_arrays(raw, priors, stride)
    cx, cy, w, h = d["cx"], d["cy"], d["w"], d["h"]
    if image_size is not None:
        cx, cy, w, h = clip_boxes(cx, cy, w, h, image_size)
    out: list[list[Detection]] = []
    for n in range(raw.shape[0]):
        dets = []
        for idx in zip(*np.nonzero(d["conf"][n] >= conf_thresh)):
            probs = tuple(float(v) for v in d["cls"][n][idx])
            dets.append(Detection(
                cx=float(cx[n][idx]), cy=float(cy[n][idx]), w=float(w[n][idx]), h=float(h[n][idx]),
                confidence=float(d["conf"][n][idx]), class_probs=probs,
                class_id=int(np.argmax(probs)),
            ))
        out.append(dets)
    return out


def _corners(box):
    if isinstance(box, Detection):
        return box.corners
    cx, cy, w, h = box[:4]
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def diou(a, b) -> float:
    """Distance-IoU of two boxes given as Detections or ``(cx, cy, w, h)``."""
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    iou = inter / union if union > 0 else 0.0
    rho2 = ((ax1 + ax2) / 2 - (bx1 + bx2) / 2) ** 2 + ((ay1 + ay2) / 2 - (by1 + by2) / 2) ** 2
    c2 = (max(ax2, bx2) - min(ax1, bx1)) ** 2 + (max(ay2, by2) - min(ay1, by1)) ** 2
    return iou - (rho2 / c2 if c2 > 0 else 0.0)


def diou_matrix(boxes: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """DIoU of every ``(cx, cy, w, h)`` row in ``boxes`` against a single box ``ref``."""
    x1, y1 = boxes[:, 0] - boxes[:, 2] / 2, boxes[:, 1] - boxes[:, 3] / 2
    x2, y2 = boxes[:, 0] + boxes[:, 2] / 2, boxes[:, 1] + boxes[:, 3] / 2
    rx1, ry1 = ref[0] - ref[2] / 2, ref[1] - ref[3] / 2
    rx2, ry2 = ref[0] + ref[2] / 2, ref[1] + ref[3] / 2
    inter = np.clip(np.minimum(x2, rx2) - np.maximum(x1, rx1), 0, None) * np.clip(
        np.minimum(y2, ry2) - np.maximum(y1, ry1), 0, None
    )
    union = (x2 - x1) * (y2 - y1) + (rx2 - rx1) * (ry2 - ry1) - inter
    iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    rho2 = ((x1 + x2) / 2 - (rx1 + rx2) / 2) ** 2 + ((y1 + y2) / 2 - (ry1 + ry2) / 2) ** 2
    c2 = (np.maximum(x2, rx2) - np.minimum(x1, rx1)) ** 2 + (np.maximum(y2, ry2) - np.minimum(y1, ry1)) ** 2
    return iou - np.divide(rho2, c2, out=np.zeros_like(rho2), where=c2 > 0)


def diou_nms(dets: list[Detection], conf_thresh: float = DEFAULT_CONF_THRESH,
             diou_thresh: float = DEFAULT_DIOU_THRESH) -> list[Detection]:
    """Greedy per-class suppression of boxes whose DIoU with a kept box exceeds ``diou_thresh``.

    Equal confidences are resolved by input order. The result is sorted by
    confidence (descending), again stable with respect to input order.
    """
    kept: list[tuple[float, int]] = []
    classes = sorted({d.class_id for d in dets})
    for cls in classes:
        idx = [i for i, d in enumerate(dets) if d.class_id == cls and d.confidence >= conf_thresh]
        if not idx:
            continue
        idx.sort(key=lambda i: (-dets[i].confidence, i))
        boxes = np.array([[dets[i].cx, dets[i].cy, dets[i].w, dets[i].h] for i in idx], dtype=np.float64)
        alive = np.ones(len(idx), dtype=bool)
        for pos in range(len(idx)):
            if not alive[pos]:
                continue
            kept.append((dets[idx[pos]].confidence, idx[pos]))
            rest = np.nonzero(alive[pos + 1 :])[0] + pos + 1
            if rest.size:
                alive[rest[diou_matrix(boxes[rest], boxes[pos]) > diou_thresh]] = False
    kept.sort(key=lambda ci: (-ci[0], ci[1]))
    return [dets[i] for _, i in kept]

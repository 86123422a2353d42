"""Target assignment and the detection loss (IoU location + BCE confidence/class terms)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dbfen import LEVELS
from .head import ANCHORS_PER_CELL, FIELDS, LEVEL_STRIDE, NUM_CLASSES, split_raw
from .tensor import NumericalError, ShapeError, Tensor, _make, _sigmoid

logger = logging.getLogger(__name__)

IGNORE_THRESH = 0.5


@dataclass
class GroundTruth:
    cx: float
    cy: float
    w: float
    h: float
    class_id: int


@dataclass
class Assignment:
    image: int
    level: int
    anchor: int
    cell_x: int
    cell_y: int
    box: tuple[float, float, float, float]
    class_id: int
    # regression targets: sigmoid offsets within the cell, log size ratios
    t_target: tuple[float, float, float, float]


@dataclass
class TargetAssignment:
    assigned: list[Assignment]
    objectness: dict[int, np.ndarray]  # level -> (N, 3, S, S) in {0, 1}
    ignore: dict[int, np.ndarray]  # level -> (N, 3, S, S) bool
    skipped: int = 0
    priors: dict[int, np.ndarray] = field(default_factory=dict)


def _box_iou(a, b) -> np.ndarray:
    """IoU of (..., 4) centre-format arrays, broadcast against each other."""
    ax1, ay1 = a[..., 0] - a[..., 2] / 2, a[..., 1] - a[..., 3] / 2
    ax2, ay2 = a[..., 0] + a[..., 2] / 2, a[..., 1] + a[..., 3] / 2
    bx1, by1 = b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2
    bx2, by2 = b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0, None)
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return inter / union


def assign_targets(gts: list[list[GroundTruth]], priors: dict[int, np.ndarray], image_size: int,
                   ignore_thresh: float = IGNORE_THRESH) -> TargetAssignment:
    """Give every ground-truth box one ``(level, cell, anchor)`` slot.

    The slot's prior is the one with the largest IoU against the box when both are
    centred at the origin; ties go to the lowest global anchor index, where anchors
    are enumerated level 1, 2, 3 and then by position within the level. Zero-area
    boxes are skipped and counted.
    """
    n_img = len(gts)
    grids = {k: image_size // LEVEL_STRIDE[k] for k in LEVELS}
    flat = np.concatenate([np.asarray(priors[k], dtype=np.float64).reshape(ANCHORS_PER_CELL, 2) for k in LEVELS])
    objectness = {k: np.zeros((n_img, ANCHORS_PER_CELL, grids[k], grids[k])) for k in LEVELS}
    ignore = {k: np.zeros((n_img, ANCHORS_PER_CELL, grids[k], grids[k]), dtype=bool) for k in LEVELS}
    assigned: list[Assignment] = []
    skipped = 0

    # prior boxes placed at every cell centre, for the ignore mask
    cell_boxes = {}
    for k in LEVELS:
        s, stride = grids[k], LEVEL_STRIDE[k]
        centers = (np.arange(s) + 0.5) * stride
        pr = np.asarray(priors[k], dtype=np.float64).reshape(ANCHORS_PER_CELL, 2)
        cb = np.zeros((ANCHORS_PER_CELL, s, s, 4))
        cb[..., 0] = centers[None, None, :]
        cb[..., 1] = centers[None, :, None]
        cb[..., 2] = pr[:, 0, None, None]
        cb[..., 3] = pr[:, 1, None, None]
        cell_boxes[k] = cb

    for n, boxes in enumerate(gts):
        for gt in boxes:
            if not (gt.w > 0 and gt.h > 0):
                skipped += 1
                continue
            if not 0 <= gt.class_id < NUM_CLASSES:
                raise ValueError(f"class id {gt.class_id} out of range")
            inter = np.minimum(gt.w, flat[:, 0]) * np.minimum(gt.h, flat[:, 1])
            ious = inter / (gt.w * gt.h + flat[:, 0] * flat[:, 1] - inter)
            best = int(np.argmax(ious))  # first maximum == lowest index
            level, anchor = LEVELS[best // ANCHORS_PER_CELL], best % ANCHORS_PER_CELL
            stride, s = LEVEL_STRIDE[level], grids[level]
            gx = min(int(np.floor(gt.cx / stride)), s - 1)
            gy = min(int(np.floor(gt.cy / stride)), s - 1)
            pw, ph = flat[best]
            t_target = (gt.cx / stride - gx, gt.cy / stride - gy, float(np.log(gt.w / pw)), float(np.log(gt.h / ph)))
            assigned.append(Assignment(n, level, anchor, gx, gy, (gt.cx, gt.cy, gt.w, gt.h), gt.class_id, t_target))
            objectness[level][n, anchor, gy, gx] = 1.0
            box = np.array([gt.cx, gt.cy, gt.w, gt.h])
            for k in LEVELS:
                ignore[k][n] |= _box_iou(cell_boxes[k], box) > ignore_thresh
    if skipped:
        logger.warning("skipped %d zero-area ground-truth boxes", skipped)
    for k in LEVELS:
        ignore[k] &= objectness[k] == 0
    return TargetAssignment(assigned, objectness, ignore, skipped,
                            {k: np.asarray(priors[k], dtype=np.float64).reshape(ANCHORS_PER_CELL, 2) for k in LEVELS})


def _bce_logits(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    # softplus(z) - y z, stable for large |z|
    return np.maximum(z, 0) - y * z + np.log1p(np.exp(-np.abs(z)))


def _iou_and_grad(pred, gt):
    """IoU of centre-format boxes and its partials w.r.t. pred (cx, cy, w, h)."""
    cx, cy, w, h = pred
    gcx, gcy, gw, gh = gt
    x1, x2, y1, y2 = cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2
    X1, X2, Y1, Y2 = gcx - gw / 2, gcx + gw / 2, gcy - gh / 2, gcy + gh / 2
    ix = np.minimum(x2, X2) - np.maximum(x1, X1)
    iy = np.minimum(y2, Y2) - np.maximum(y1, Y1)
    iw, ih = np.maximum(ix, 0), np.maximum(iy, 0)
    inter = iw * ih
    area = w * h
    union = area + gw * gh - inter
    iou = inter / union

    on_x, on_y = (ix > 0).astype(float), (iy > 0).astype(float)
    diw_dx1 = -((x1 > X1) * on_x)
    diw_dx2 = (x2 < X2) * on_x
    dih_dy1 = -((y1 > Y1) * on_y)
    dih_dy2 = (y2 < Y2) * on_y
    d_inter = (union + inter) / union**2
    d_area = -inter / union**2
    g_cx = d_inter * ih * (diw_dx1 + diw_dx2)
    g_cy = d_inter * iw * (dih_dy1 + dih_dy2)
    g_w = d_inter * ih * 0.5 * (diw_dx2 - diw_dx1) + d_area * h
    g_h = d_inter * iw * 0.5 * (dih_dy2 - dih_dy1) + d_area * w
    return iou, (g_cx, g_cy, g_w, g_h)


def detection_loss(raw: list[Tensor], targets: TargetAssignment, return_terms: bool = False):
    """``sum(1 - IoU) + BCE(objectness over non-ignored anchors) + BCE(classes of assigned)``.

    ``raw`` holds the head outputs for levels 1, 2, 3. Returns a ``1x1x1x1`` tensor,
    optionally with the three terms as floats.
    """
    if len(raw) != len(LEVELS):
        raise ShapeError(f"expected {len(LEVELS)} raw prediction levels, got {len(raw)}")
    parts = {}
    grads = {}
    loc = conf = cls = 0.0
    for k, r in zip(LEVELS, raw):
        p = split_raw(r.data)
        if p.shape[:4] != targets.objectness[k].shape:
            raise ShapeError(f"level {k}: prediction grid {p.shape[:4]} vs targets {targets.objectness[k].shape}")
        parts[k] = p
        g = np.zeros(p.shape, dtype=np.float64)
        obj = targets.objectness[k]
        weight = (~targets.ignore[k]).astype(np.float64)
        z = p[..., 4].astype(np.float64)
        conf += float((_bce_logits(z, obj) * weight).sum())
        g[..., 4] = (_sigmoid(z) - obj) * weight
        grads[k] = g

    by_level: dict[int, list[Assignment]] = {k: [] for k in LEVELS}
    for a in targets.assigned:
        by_level[a.level].append(a)
    for k, items in by_level.items():
        if not items:
            continue
        p, g = parts[k], grads[k]
        stride = LEVEL_STRIDE[k]
        idx = (
            np.array([a.image for a in items]),
            np.array([a.anchor for a in items]),
            np.array([a.cell_y for a in items]),
            np.array([a.cell_x for a in items]),
        )
        t = p[idx].astype(np.float64)  # (M, 7)
        pri = targets.priors[k][idx[1]]
        sx, sy = _sigmoid(t[:, 0]), _sigmoid(t[:, 1])
        pred = ((sx + idx[3]) * stride, (sy + idx[2]) * stride, pri[:, 0] * np.exp(t[:, 2]), pri[:, 1] * np.exp(t[:, 3]))
        gt = np.array([a.box for a in items]).T
        iou, (g_cx, g_cy, g_w, g_h) = _iou_and_grad(pred, gt)
        loc += float((1.0 - iou).sum())
        dt = np.zeros((len(items), FIELDS))
        dt[:, 0] = -g_cx * stride * sx * (1 - sx)
        dt[:, 1] = -g_cy * stride * sy * (1 - sy)
        dt[:, 2] = -g_w * pred[2]
        dt[:, 3] = -g_h * pred[3]
        labels = np.zeros((len(items), NUM_CLASSES))
        labels[np.arange(len(items)), [a.class_id for a in items]] = 1.0
        cls += float(_bce_logits(t[:, 5:], labels).sum())
        dt[:, 5:] = _sigmoid(t[:, 5:]) - labels
        np.add.at(g, idx, dt)

    total = loc + conf + cls
    if not np.isfinite(total):
        raise NumericalError(f"non-finite detection loss (loc={loc}, conf={conf}, cls={cls})")

    def backward(gout):
        s = float(gout.reshape(()))
        out = []
        for k, r in zip(LEVELS, raw):
            n, _, sy_, sx_ = r.shape
            gk = grads[k].transpose(0, 1, 4, 2, 3).reshape(n, ANCHORS_PER_CELL * FIELDS, sy_, sx_)
            out.append((gk * s).astype(r.dtype))
        return tuple(out)

    dtype = raw[0].dtype
    loss = _make(np.full((1, 1, 1, 1), total, dtype=dtype), "detection_loss", list(raw), backward)
    if return_terms:
        return loss, {"loc": loc, "conf": conf, "cls": cls, "total": total}
    return loss

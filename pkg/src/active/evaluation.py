"""IoU, precision/recall and all-point interpolated average precision (AP50)."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .head import NUM_CLASSES

logger = logging.getLogger(__name__)

CLASS_NAMES = ("sperm", "impurity")


def iou_box(a, b) -> float:
    """IoU of two ``(cx, cy, w, h)`` boxes; 0 for disjoint or zero-area boxes."""
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    area_a, area_b = a[2] * a[3], b[2] * b[3]
    if area_a <= 0 or area_b <= 0:
        logger.warning("iou_box on a zero-area box")
        return 0.0
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter / (area_a + area_b - inter)


@dataclass
class ScoredBox:
    image: int
    confidence: float
    box: tuple[float, float, float, float]


@dataclass
class ClassReport:
    tp: int
    fp: int
    fn: int
    n_annotations: int
    n_detections: int
    ap: float | None
    precision: list[float] = field(default_factory=list)
    recall: list[float] = field(default_factory=list)


def match_detections(dets: list[ScoredBox], gts: dict[int, list], iou_thresh: float = 0.5) -> np.ndarray:
    """TP flags in ranked order (confidence descending, deterministic tie-break).

    A detection is a true positive when its best-IoU unmatched ground truth in the
    same image reaches ``iou_thresh``; ties between ground truths go to the lower index.
    """
    ranked = sorted(dets, key=lambda d: (-d.confidence, d.image, tuple(d.box)))
    used = {img: [False] * len(boxes) for img, boxes in gts.items()}
    flags = np.zeros(len(ranked), dtype=bool)
    for r, d in enumerate(ranked):
        boxes = gts.get(d.image, [])
        best, best_iou = -1, -1.0
        for gi, g in enumerate(boxes):
            if used[d.image][gi]:
                continue
            v = iou_box(d.box, g)
            if v > best_iou:
                best, best_iou = gi, v
        if best >= 0 and best_iou >= iou_thresh:
            used[d.image][best] = True
            flags[r] = True
    return flags


def _curve(flags: np.ndarray, n_gt: int):
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    precision = tp / np.maximum(tp + fp, 1)
    recall = tp / n_gt
    return precision, recall


def ap_from_flags(flags: np.ndarray, n_gt: int) -> float | None:
    """Sum over recovered ground truths of the right-envelope precision, over ``n_gt``."""
    if n_gt == 0:
        return None
    if len(flags) == 0:
        return 0.0
    precision, _ = _curve(flags, n_gt)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(envelope[flags].sum() / n_gt)


def average_precision(dets: list[ScoredBox], gts: dict[int, list], iou_thresh: float = 0.5) -> float | None:
    """AP of one class; ``None`` when there are no annotations."""
    n_gt = sum(len(v) for v in gts.values())
    return ap_from_flags(match_detections(dets, gts, iou_thresh), n_gt)


@dataclass
class EvalReport:
    classes: dict[str, ClassReport]
    mean_ap: float | None
    n_detections: int
    iou_thresh: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)

    def ap_table(self) -> list[tuple[str, float | None]]:
        return [(name, rep.ap) for name, rep in self.classes.items()]


def ap50_report(dets_by_image: dict[int, list], gts_by_image: dict[int, list],
                iou_thresh: float = 0.5) -> EvalReport:
    """Pool detections over images and compute per-class AP plus their mean.

    ``dets_by_image`` maps image id to items with ``class_id, confidence, cx, cy, w, h``
    (e.g. :class:`~active.head.Detection`); ``gts_by_image`` maps image id to items
    with ``class_id, cx, cy, w, h``.
    """
    per_class_dets: dict[int, list[ScoredBox]] = {c: [] for c in range(NUM_CLASSES)}
    per_class_gts: dict[int, dict[int, list]] = {c: {} for c in range(NUM_CLASSES)}
    for img, gts in gts_by_image.items():
        for g in gts:
            if not 0 <= g.class_id < NUM_CLASSES:
                raise ValueError(f"unknown class id {g.class_id} in annotations of image {img}")
            per_class_gts[g.class_id].setdefault(img, []).append((g.cx, g.cy, g.w, g.h))
    n_det = 0
    for img, dets in dets_by_image.items():
        for d in dets:
            if not 0 <= d.class_id < NUM_CLASSES:
                raise ValueError(f"unknown class id {d.class_id} in detections of image {img}")
            per_class_dets[d.class_id].append(ScoredBox(img, float(d.confidence), (d.cx, d.cy, d.w, d.h)))
            n_det += 1

    classes = {}
    aps = []
    for c in range(NUM_CLASSES):
        gts = per_class_gts[c]
        n_gt = sum(len(v) for v in gts.values())
        flags = match_detections(per_class_dets[c], gts, iou_thresh)
        ap = ap_from_flags(flags, n_gt)
        precision, recall = _curve(flags, n_gt) if len(flags) and n_gt else (np.array([]), np.array([]))
        tp = int(flags.sum())
        classes[CLASS_NAMES[c]] = ClassReport(
            tp=tp, fp=int(len(flags) - tp), fn=n_gt - tp, n_annotations=n_gt, n_detections=len(flags),
            ap=ap, precision=[float(v) for v in precision], recall=[float(v) for v in recall],
        )
        if ap is not None:
            aps.append(ap)
    return EvalReport(classes, float(np.mean(aps)) if aps else None, n_det, iou_thresh)

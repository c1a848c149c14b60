"""Box geometry and detection evaluation: IoU, proposal assignment, NMS, AP."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Hashable

import numpy as np

from .annotation import BBox

POSITIVE = "positive"
NEGATIVE = "negative"
IGNORE = "ignore"


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: Hashable
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class EvalReport:
    per_class: dict
    map: float
    tp: int
    fp: int
    iou_threshold: float = 0.5
    n_gt: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "iou_threshold": self.iou_threshold,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "map": self.map,
            "tp": self.tp,
            "fp": self.fp,
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    def table(self, columns=None):
        """Render per-class AP in percent with a trailing ``average`` column."""
        columns = list(columns if columns is not None else self.per_class)
        head = " | ".join(str(c) for c in columns + ["average"])
        cells = []
        for c in columns:
            v = self.per_class.get(c)
            cells.append("-" if v is None else f"{100 * v:.1f}%")
        cells.append(f"{100 * self.map:.1f}%")
        return head + "\n" + " | ".join(cells)


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU of two ``(n, 4)`` / ``(m, 4)`` xyxy arrays."""
    a = np.asarray(boxes_a, dtype=float).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def assign_proposals(proposals, gts, pos_thresh=0.7, neg_thresh=0.3):
    """Label each proposal positive / negative / ignore by its best IoU."""
    if not 0.0 <= neg_thresh < pos_thresh <= 1.0:
        raise ValueError(f"need 0 <= neg_thresh < pos_thresh <= 1, got ({neg_thresh}, {pos_thresh})")
    out = []
    for p in proposals:
        best = max((iou(p, g) for g in gts), default=0.0)
        if best >= pos_thresh:
            out.append(POSITIVE)
        elif best < neg_thresh:
            out.append(NEGATIVE)
        else:
            out.append(IGNORE)
    return out


def _by_confidence(dets):
    return sorted(dets, key=lambda d: -d.confidence)


def nms(dets, iou_thresh=0.45):
    """Per-class greedy suppression; boxes overlapping a kept one by > ``iou_thresh`` go."""
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1], got {iou_thresh}")
    ordered = _by_confidence(dets)
    if not ordered:
        return []
    boxes = np.array([d.box.as_tuple() for d in ordered])
    classes = [d.class_id for d in ordered]
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(ordered), dtype=bool)
    keep = []
    for i in range(len(ordered)):
        if suppressed[i]:
            continue
        keep.append(ordered[i])
        for j in range(i + 1, len(ordered)):
            if not suppressed[j] and classes[j] == classes[i] and overlaps[i, j] > iou_thresh:
                suppressed[j] = True
    return keep


def match_detections(dets, gts, iou_thresh=0.5):
    """Greedy confidence-ordered matching; returns the sorted detections and TP flags."""
    ordered = _by_confidence(dets)
    if not ordered:
        return ordered, np.zeros(0, dtype=bool)
    if not gts:
        return ordered, np.zeros(len(ordered), dtype=bool)
    overlaps = iou_matrix([d.box.as_tuple() for d in ordered], [g.as_tuple() for g in gts])
    taken = np.zeros(len(gts), dtype=bool)
    is_tp = np.zeros(len(ordered), dtype=bool)
    for i in range(len(ordered)):
        cand = np.where(taken, -1.0, overlaps[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_thresh:
            taken[j] = True
            is_tp[i] = True
    return ordered, is_tp


def ap_from_flags(is_tp, n_gt):
    """All-point interpolated area under the precision/recall curve."""
    if n_gt == 0 or len(is_tp) == 0:
        return 0.0
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~is_tp)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(dets, gts, iou_thresh=0.5):
    """Single-class AP with greedy matching. Returns ``(ap, tp, fp)``."""
    _, is_tp = match_detections(dets, gts, iou_thresh)
    n_tp = int(is_tp.sum())
    return ap_from_flags(is_tp, len(gts)), n_tp, len(is_tp) - n_tp


def mean_ap(per_class):
    if not per_class:
        raise ValueError("mean_ap needs at least one class")
    return float(np.mean(list(per_class.values())))


def evaluate_detections(images, iou_thresh=0.5, classes=None, class_agnostic=False):
    """Evaluate a corpus of ``(detections, ground_truth)`` pairs.

    ``ground_truth`` is a list of ``(class_id, BBox)``. Detections are matched
    within each image; precision/recall are accumulated over the corpus.
    Classes without ground-truth instances are left out of the mean.
    """
    flags = {}
    confs = {}
    n_gt = {}
    for dets, gts in images:
        if class_agnostic:
            dets = [Detection(d.box, None, d.confidence) for d in dets]
            gts = [(None, b) for _, b in gts]
        present = {c for c, _ in gts} | {d.class_id for d in dets}
        for c in present:
            cd = [d for d in dets if d.class_id == c]
            cg = [b for k, b in gts if k == c]
            n_gt[c] = n_gt.get(c, 0) + len(cg)
            ordered, is_tp = match_detections(cd, cg, iou_thresh)
            flags.setdefault(c, []).extend(is_tp.tolist())
            confs.setdefault(c, []).extend(d.confidence for d in ordered)
    per_class = {}
    tp = fp = 0
    keys = list(classes) if classes is not None else sorted(n_gt, key=str)
    for c in keys:
        f = np.array(flags.get(c, []), dtype=bool)
        s = np.array(confs.get(c, []), dtype=float)
        order = np.argsort(-s, kind="stable")
        f = f[order]
        tp += int(f.sum())
        fp += int((~f).sum())
        if n_gt.get(c, 0) > 0:
            per_class[c] = ap_from_flags(f, n_gt[c])
    if classes is not None:
        # detections of classes outside the requested list still count as FP
        for c, fl in flags.items():
            if c not in keys:
                fp += int(len(fl) - np.sum(fl))
                tp += int(np.sum(fl))
    m = mean_ap(per_class) if per_class else 0.0
    return EvalReport(
        per_class=per_class, map=m, tp=tp, fp=fp, iou_threshold=iou_thresh, n_gt=n_gt
    )

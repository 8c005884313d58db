"""VOC-style average precision and named precision-per-FLOPs variants.

Matching: detections are visited by descending score (ties keep input order).
Each takes the highest-IoU still-unmatched, non-difficult ground truth in its
image; IoU >= ``iou_thresh`` makes it a true positive.  A detection that fails
to match but overlaps a difficult ground truth at the threshold is ignored
(neither TP nor FP); difficult boxes never count as misses.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boxes import iou_matrix
from .data_io import ImageRecord
from .postprocess import Detection

INTERPOLATIONS = ("all", "11")


@dataclass(frozen=True)
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    scores: np.ndarray
    ap: float
    interp: str
    iou_thresh: float
    num_gt: int
    num_tp: int
    num_fp: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["rank", "score", "recall", "precision"])
        for i, (s, r, p) in enumerate(zip(self.scores, self.recall, self.precision), 1):
            writer.writerow([i, repr(float(s)), repr(float(r)), repr(float(p))])
        return buf.getvalue()


def match_detections(dets: Sequence[Detection], gts: Sequence[ImageRecord], iou_thresh: float = 0.5,
                     class_name: str | None = None) -> tuple[np.ndarray, np.ndarray, int]:
    """Sorted scores, per-detection outcome (1 TP, 0 FP, -1 ignored) and the number of counted gts."""
    by_image: dict[str, ImageRecord] = {}
    for record in gts:
        if record.image_id in by_image:
            raise ValueError(f"duplicate image_id {record.image_id!r} in ground truth")
        by_image[record.image_id] = record

    gt_boxes, gt_difficult = {}, {}
    num_gt = 0
    for image_id, record in by_image.items():
        anns = [a for a in record.annotations if class_name is None or a.name == class_name]
        gt_boxes[image_id] = np.array([a.box.as_list() for a in anns], dtype=np.float64).reshape(-1, 4)
        gt_difficult[image_id] = np.array([a.difficult for a in anns], dtype=bool)
        num_gt += int((~gt_difficult[image_id]).sum())

    scores = np.array([d.score for d in dets], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gt_boxes.items()}
    outcome = np.zeros(len(dets), dtype=np.int64)
    for rank, i in enumerate(order):
        det = dets[i]
        boxes = gt_boxes.get(det.image_id)
        if boxes is None or len(boxes) == 0:
            continue
        overlaps = iou_matrix(det.box.as_array(), boxes)[0]
        difficult = gt_difficult[det.image_id]
        free = ~difficult & ~used[det.image_id]
        if free.any():
            cand = np.where(free, overlaps, -1.0)
            best = int(np.argmax(cand))
            if cand[best] >= iou_thresh:
                used[det.image_id][best] = True
                outcome[rank] = 1
                continue
        if np.any(difficult & (overlaps >= iou_thresh)):
            outcome[rank] = -1
    return scores[order], outcome, num_gt


def _envelope_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _eleven_point_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    total = 0.0
    for t in np.linspace(0.0, 1.0, 11):
        mask = recall >= t
        total += float(precision[mask].max()) if mask.any() else 0.0
    return total / 11.0


def average_precision(dets: Sequence[Detection], gts: Sequence[ImageRecord], iou_thresh: float = 0.5,
                      interp: str = "all", class_name: str | None = None) -> PRCurve:
    """Single-class AP; ``interp`` is ``"all"`` (area under the envelope) or ``"11"``.

    AP is 0 when there are no counted ground truths.
    """
    if interp not in INTERPOLATIONS:
        raise ValueError(f"interp must be one of {INTERPOLATIONS}")
    scores, outcome, num_gt = match_detections(dets, gts, iou_thresh, class_name)
    counted = outcome >= 0
    scores, outcome = scores[counted], outcome[counted]
    tp = np.cumsum(outcome == 1)
    fp = np.cumsum(outcome == 0)
    precision = tp / np.maximum(tp + fp, 1)
    recall = tp / num_gt if num_gt else np.zeros(len(tp))
    if num_gt == 0 or len(tp) == 0:
        ap = 0.0
    elif interp == "all":
        ap = _envelope_ap(recall, precision)
    else:
        ap = _eleven_point_ap(recall, precision)
    return PRCurve(recall.astype(np.float64), precision.astype(np.float64), scores, ap, interp,
                   float(iou_thresh), num_gt, int(tp[-1]) if len(tp) else 0, int(fp[-1]) if len(fp) else 0)


def mean_average_precision(dets: Sequence[Detection], gts: Sequence[ImageRecord], class_names: Sequence[str],
                           iou_thresh: float = 0.5, interp: str = "all") -> tuple[float, dict[str, PRCurve]]:
    """Unweighted mean of per-class AP; detection ``class_id`` indexes ``class_names``."""
    curves = {}
    for k, name in enumerate(class_names):
        curves[name] = average_precision([d for d in dets if d.class_id == k], gts, iou_thresh, interp, name)
    mean = float(np.mean([c.ap for c in curves.values()])) if curves else 0.0
    return mean, curves


PPF_VARIANTS = {
    "map_over_gflops": lambda m, g: m / g,
    "map_over_log2_1p": lambda m, g: m / math.log2(1.0 + g),
    "map_over_sqrt_gflops": lambda m, g: m / math.sqrt(g),
}


@dataclass(frozen=True)
class PPF:
    variant: str
    value: float

    def __str__(self):
        return f"ppf[{self.variant}] = {self.value:.6g}"


def ppf(map_value: float, gflops: float, variant: str = "map_over_log2_1p") -> PPF:
    """Accuracy per compute under an explicitly named house formula."""
    if variant not in PPF_VARIANTS:
        raise ValueError(f"unknown PPF variant {variant!r}; known: {sorted(PPF_VARIANTS)}")
    if not gflops > 0:
        raise ValueError("gflops must be positive")
    return PPF(variant, float(PPF_VARIANTS[variant](map_value, gflops)))

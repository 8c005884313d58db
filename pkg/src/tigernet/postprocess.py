"""Head outputs to final detections: decode, threshold, suppress.

Both suppressors treat a detection as overlapping its seed when
``IoU >= iou_thresh``.  Order is by descending score with ties broken by the
lower input index.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from .anchors import AnchorGrid, decode_boxes
from .boxes import BoundingBox, iou_matrix
from .losses import softmax


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: BoundingBox
    score: float
    class_id: int = 0

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0) or math.isnan(self.score):
            raise ValueError(f"score {self.score} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps({"image_id": self.image_id, "bbox": self.box.as_list(),
                           "score": self.score, "class": self.class_id})

    @classmethod
    def from_json(cls, line: str) -> "Detection":
        obj = json.loads(line)
        try:
            return cls(str(obj["image_id"]), BoundingBox.from_array(obj["bbox"]), float(obj["score"]),
                       int(obj.get("class", 0)))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"bad detection record {line.strip()!r}: {exc}") from None


def flatten_head_outputs(head_outputs: Sequence[tuple[np.ndarray, np.ndarray]], num_classes: int):
    """Concatenate per-level (A*K, H, W) / (4A, H, W) tensors into (N, K) and (N, 4) in anchor order."""
    cls_rows, box_rows = [], []
    for cls_map, box_map in head_outputs:
        ak, h, w = cls_map.shape
        a = ak // num_classes
        if a * num_classes != ak or box_map.shape != (4 * a, h, w):
            raise ValueError(f"inconsistent head shapes {cls_map.shape} / {box_map.shape}")
        cls_rows.append(cls_map.reshape(a, num_classes, h, w).transpose(2, 3, 0, 1).reshape(-1, num_classes))
        box_rows.append(box_map.reshape(a, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4))
    return np.concatenate(cls_rows, axis=0), np.concatenate(box_rows, axis=0)


def decode_detections(head_outputs, grids: Sequence[AnchorGrid], score_thresh: float = 0.05,
                      clip_to: tuple[int, int] | None = None, image_id: str = "", num_classes: int = 2,
                      variances=(1.0, 1.0, 1.0, 1.0)) -> list[Detection]:
    """Softmax scores, foreground scores >= ``score_thresh``, decoded and clipped boxes.

    ``clip_to`` is (height, width).  Boxes that clip to zero area are dropped.
    Foreground softmax class ``k`` becomes ``class_id = k - 1``.
    """
    logits, deltas = flatten_head_outputs(head_outputs, num_classes)
    anchors = np.concatenate([g.anchors for g in grids], axis=0)
    if len(anchors) != len(logits):
        raise ValueError(f"{len(anchors)} anchors but {len(logits)} predictions")
    probs = softmax(logits)
    fg = probs[:, 1:]
    keep_a, keep_k = np.nonzero(fg >= score_thresh)
    if len(keep_a) == 0:
        return []
    boxes = decode_boxes(anchors[keep_a], deltas[keep_a], variances)
    if clip_to is not None:
        h, w = clip_to
        boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0.0, w)
        boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0.0, h)
    dets = []
    for row, a, k in zip(boxes, keep_a, keep_k):
        if row[2] <= row[0] or row[3] <= row[1]:
            continue
        dets.append(Detection(image_id, BoundingBox.from_array(row), float(min(fg[a, k], 1.0)), int(k)))
    return dets


def _score_order(dets: Sequence[Detection]) -> np.ndarray:
    scores = np.array([d.score for d in dets], dtype=np.float64)
    return np.argsort(-scores, kind="stable")


def _clusters(dets: Sequence[Detection], iou_thresh: float):
    """Yield (seed index, member indices) in suppression order; members include the seed."""
    if not dets:
        return
    boxes = np.array([d.box.as_list() for d in dets], dtype=np.float64)
    order = _score_order(dets)
    overlaps = iou_matrix(boxes, boxes)
    alive = np.ones(len(dets), dtype=bool)
    for seed in order:
        if not alive[seed]:
            continue
        members = order[alive[order] & ((overlaps[seed, order] >= iou_thresh) | (order == seed))]
        alive[members] = False
        yield int(seed), members


def greedy_nms(dets: Sequence[Detection], iou_thresh: float = 0.5) -> list[Detection]:
    """Classic suppression for a single class; returns kept inputs by descending score."""
    return [dets[seed] for seed, _ in _clusters(dets, iou_thresh)]


def greedy_nms_indices(dets: Sequence[Detection], iou_thresh: float = 0.5) -> list[int]:
    return [seed for seed, _ in _clusters(dets, iou_thresh)]


def blend_nms(dets: Sequence[Detection], iou_thresh: float = 0.5) -> list[Detection]:
    """Suppression that replaces each kept box by the score-weighted mean of its cluster.

    The kept score is the seed score.  The blended coordinates are clamped to
    the coordinate-wise range of the cluster, so a cluster of identical boxes
    returns that box exactly.
    """
    return [d for _, d in blend_nms_with_seeds(dets, iou_thresh)]


def blend_nms_with_seeds(dets: Sequence[Detection], iou_thresh: float = 0.5) -> list[tuple[int, Detection]]:
    out = []
    for seed, members in _clusters(dets, iou_thresh):
        coords = np.array([dets[m].box.as_list() for m in members], dtype=np.float64)
        weights = np.array([dets[m].score for m in members], dtype=np.float64)
        total = weights.sum()
        if total > 0.0:
            blended = (weights[:, None] * coords).sum(axis=0) / total
        else:
            blended = coords.mean(axis=0)
        blended = np.clip(blended, coords.min(axis=0), coords.max(axis=0))
        out.append((seed, replace(dets[seed], box=BoundingBox.from_array(blended))))
    return out


SUPPRESSORS = {"greedy": greedy_nms, "blend": blend_nms}


def suppress(dets: Sequence[Detection], mode: str = "blend", iou_thresh: float = 0.5) -> list[Detection]:
    """Suppress per (image_id, class_id) group; groups emitted in first-seen order."""
    if mode == "none":
        return list(dets)
    try:
        fn = SUPPRESSORS[mode]
    except KeyError:
        raise ValueError(f"unknown suppression mode {mode!r}") from None
    groups: dict[tuple[str, int], list[Detection]] = {}
    for d in dets:
        groups.setdefault((d.image_id, d.class_id), []).append(d)
    out = []
    for group in groups.values():
        out.extend(fn(group, iou_thresh))
    return out


def read_detections(source: str | Path | TextIO) -> list[Detection]:
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            return read_detections(fh)
    dets = []
    for lineno, line in enumerate(source, 1):
        if not line.strip():
            continue
        try:
            dets.append(Detection.from_json(line))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return dets


def write_detections(dets: Iterable[Detection], dest: str | Path | TextIO) -> None:
    if isinstance(dest, (str, Path)):
        with open(dest, "w") as fh:
            write_detections(dets, fh)
        return
    for d in dets:
        dest.write(d.to_json() + "\n")

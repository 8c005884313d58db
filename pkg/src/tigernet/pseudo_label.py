"""Teacher predictions on unlabelled images promoted to training annotations."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .data_io import Annotation, ImageRecord
from .postprocess import Detection, suppress

DEDUP_POLICIES = ("prefer_labeled", "error")


def predictions_to_labels(dets: Sequence[Detection], image_sizes: Mapping[str, tuple[int, int]],
                          score_thresh: float = 0.5, nms_mode: str = "blend", iou_thresh: float = 0.5,
                          class_names: Sequence[str] = ("tiger",), keep_empty: bool = True) -> list[ImageRecord]:
    """Suppress, then threshold, then emit one pseudo record per image in ``image_sizes`` order.

    ``image_sizes`` maps image_id to (width, height).  Boxes are clipped to the
    image; those left with zero area are dropped.  ``score_thresh=0`` keeps
    the raw teacher output.
    """
    unknown = sorted({d.image_id for d in dets} - set(image_sizes))
    if unknown:
        raise ValueError(f"detections reference unknown images: {unknown[:5]}")
    by_image: dict[str, list[Detection]] = {k: [] for k in image_sizes}
    for d in dets:
        by_image[d.image_id].append(d)
    records = []
    for image_id, (width, height) in image_sizes.items():
        kept = [d for d in suppress(by_image[image_id], nms_mode, iou_thresh) if d.score >= score_thresh]
        anns = []
        for d in kept:
            if not 0 <= d.class_id < len(class_names):
                raise ValueError(f"{image_id}: class id {d.class_id} has no name")
            box = d.box.clip(width, height)
            if box.area <= 0.0:
                continue
            anns.append(Annotation(class_names[d.class_id], box, False, d.score))
        if anns or keep_empty:
            records.append(ImageRecord(image_id, width, height, tuple(anns), provenance="pseudo"))
    return records


def merge_datasets(labeled: Sequence[ImageRecord], pseudo: Sequence[ImageRecord],
                   dedup_policy: str = "prefer_labeled") -> list[ImageRecord]:
    """Labelled records (tagged human) followed by non-colliding pseudo records (tagged pseudo)."""
    if dedup_policy not in DEDUP_POLICIES:
        raise ValueError(f"dedup_policy must be one of {DEDUP_POLICIES}")
    labeled_ids = {r.image_id for r in labeled}
    if len(labeled_ids) != len(labeled):
        raise ValueError("duplicate image_id in labelled set")
    collisions = [r.image_id for r in pseudo if r.image_id in labeled_ids]
    if collisions and dedup_policy == "error":
        raise ValueError(f"image_id collision between labelled and pseudo sets: {collisions[:5]}")
    merged = [replace(r, provenance="human") for r in labeled]
    merged += [replace(r, provenance="pseudo") for r in pseudo if r.image_id not in labeled_ids]
    return merged


@dataclass(frozen=True)
class DistillReport:
    images: dict[str, int]
    boxes: dict[str, int]
    mean_boxes_per_image: dict[str, float]
    score_bins: tuple[float, ...]
    score_histogram: tuple[int, ...]

    def to_text(self) -> str:
        lines = ["provenance,images,boxes,mean_boxes_per_image"]
        for p in ("human", "pseudo"):
            lines.append(f"{p},{self.images[p]},{self.boxes[p]},{self.mean_boxes_per_image[p]:.6g}")
        lines.append("score_bin_low,score_bin_high,count")
        for lo, hi, c in zip(self.score_bins[:-1], self.score_bins[1:], self.score_histogram):
            lines.append(f"{lo:.1f},{hi:.1f},{c}")
        return "\n".join(lines) + "\n"


def distill_report(merged: Sequence[ImageRecord], bins: int = 10) -> DistillReport:
    images = {"human": 0, "pseudo": 0}
    boxes = {"human": 0, "pseudo": 0}
    scores = []
    for r in merged:
        images[r.provenance] += 1
        boxes[r.provenance] += len(r.annotations)
        if r.provenance == "pseudo":
            scores += [a.score for a in r.annotations if a.score is not None]
    edges = np.linspace(0.0, 1.0, bins + 1)
    hist, _ = np.histogram(np.asarray(scores, dtype=np.float64), bins=edges)
    mean = {p: (boxes[p] / images[p] if images[p] else 0.0) for p in images}
    return DistillReport(images, boxes, mean, tuple(edges.tolist()), tuple(int(c) for c in hist))

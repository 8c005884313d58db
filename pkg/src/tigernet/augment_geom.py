"""Box geometry for flips, affine warps and cut-and-paste placement.

Pixels never enter this module; the cutout planner only emits where a donor
box should be pasted.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .boxes import BoundingBox, iou
from .data_io import Annotation, ImageRecord


def flip_boxes(record: ImageRecord, axis: str = "horizontal") -> ImageRecord:
    """Mirror every box; ``x' = width - x`` (horizontal) or ``y' = height - y`` (vertical)."""
    if axis not in ("horizontal", "vertical"):
        raise ValueError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")
    out = []
    for ann in record.annotations:
        b = ann.box
        if axis == "horizontal":
            box = BoundingBox(record.width - b.x_max, b.y_min, record.width - b.x_min, b.y_max)
        else:
            box = BoundingBox(b.x_min, record.height - b.y_max, b.x_max, record.height - b.y_min)
        out.append(replace(ann, box=box))
    return replace(record, annotations=tuple(out))


def affine_matrix(width: float, height: float, rotation_deg: float = 0.0, shift=(0.0, 0.0),
                  scale: float = 1.0) -> np.ndarray:
    """2x3 map: scale and rotate about the image centre, then shift.

    Positive angles turn the picture counter-clockwise as displayed (y down).
    Multiples of 90 degrees use exact sines and cosines.
    """
    quarter = rotation_deg / 90.0
    if float(quarter).is_integer():
        cos, sin = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(quarter) % 4]
    else:
        rad = math.radians(rotation_deg)
        cos, sin = math.cos(rad), math.sin(rad)
    cx, cy = width / 2.0, height / 2.0
    a = np.array([[scale * cos, scale * sin], [-scale * sin, scale * cos]])
    t = np.array([cx, cy]) - a @ np.array([cx, cy]) + np.asarray(shift, dtype=np.float64)
    return np.hstack([a, t[:, None]])


def transform_box_hull(box: BoundingBox, matrix: np.ndarray) -> BoundingBox:
    corners = np.array([[box.x_min, box.y_min], [box.x_max, box.y_min],
                        [box.x_min, box.y_max], [box.x_max, box.y_max]])
    moved = corners @ matrix[:, :2].T + matrix[:, 2]
    lo, hi = moved.min(axis=0), moved.max(axis=0)
    return BoundingBox(lo[0], lo[1], hi[0], hi[1])


def affine_boxes(record: ImageRecord, rotation_deg: float = 0.0, shift=(0.0, 0.0), scale: float = 1.0,
                 min_visibility: float = 0.25) -> ImageRecord:
    """Warp box corners, take the axis-aligned hull and clip to the image.

    Boxes keeping less than ``min_visibility`` of their unclipped hull area are
    dropped.  Identity parameters return the record unchanged.
    """
    if not scale > 0 or not math.isfinite(scale):
        raise ValueError("scale must be positive and finite")
    if record.width * scale < 1 or record.height * scale < 1:
        raise ValueError("transform collapses the image to zero area")
    if rotation_deg % 360 == 0 and scale == 1.0 and tuple(shift) == (0, 0):
        return record
    matrix = affine_matrix(record.width, record.height, rotation_deg, shift, scale)
    out = []
    for ann in record.annotations:
        hull = transform_box_hull(ann.box, matrix)
        clipped = hull.clip(record.width, record.height)
        if clipped.area <= 0.0 or clipped.area < min_visibility * hull.area:
            continue
        out.append(replace(ann, box=clipped))
    return replace(record, annotations=tuple(out))


@dataclass(frozen=True)
class Placement:
    image_id: str
    src_image_id: str
    src_bbox: BoundingBox
    dst_bbox: BoundingBox

    def to_json(self) -> str:
        return json.dumps({"image_id": self.image_id, "src_image_id": self.src_image_id,
                           "src_bbox": self.src_bbox.as_list(), "dst_bbox": self.dst_bbox.as_list()})

    @classmethod
    def from_json(cls, line: str) -> "Placement":
        obj = json.loads(line)
        return cls(obj["image_id"], obj["src_image_id"], BoundingBox.from_array(obj["src_bbox"]),
                   BoundingBox.from_array(obj["dst_bbox"]))


@dataclass(frozen=True)
class CutoutResult:
    record: ImageRecord
    placement: Placement | None
    attempts: int

    @property
    def placed(self) -> bool:
        return self.placement is not None


def place_cutout(record: ImageRecord, donor_box: BoundingBox, rng_seed: int, max_iou_with_existing: float = 0.3,
                 max_attempts: int = 100, src_image_id: str = "", class_name: str = "tiger") -> CutoutResult:
    """Rejection-sample a paste position for ``donor_box`` inside ``record``.

    The top-left corner is uniform over positions that keep the box inside the
    image; a candidate is accepted when its IoU with every existing annotation
    is at most ``max_iou_with_existing``.  When the attempt budget runs out the
    record comes back unchanged with ``placement=None``.
    """
    w, h = donor_box.width, donor_box.height
    if w > record.width or h > record.height:
        raise ValueError(f"donor {w}x{h} does not fit in {record.width}x{record.height}")
    rng = np.random.default_rng(rng_seed)
    existing = [a.box for a in record.annotations]
    for attempt in range(1, max_attempts + 1):
        x0 = float(rng.uniform(0.0, record.width - w))
        y0 = float(rng.uniform(0.0, record.height - h))
        cand = BoundingBox(x0, y0, min(x0 + w, float(record.width)), min(y0 + h, float(record.height)))
        if all(iou(cand, e) <= max_iou_with_existing for e in existing):
            placement = Placement(record.image_id, src_image_id, donor_box, cand)
            anns = record.annotations + (Annotation(class_name, cand),)
            return CutoutResult(replace(record, annotations=anns), placement, attempt)
    return CutoutResult(record, None, max_attempts)

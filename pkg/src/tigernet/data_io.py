"""PASCAL VOC ingestion and serialization, dataset splitting and statistics.

VOC files store 1-based inclusive pixel indices.  Internally boxes are
continuous and 0-based: ``x_min = xmin - 1``, ``x_max = xmax`` (same for y).
The offset is applied in decimal arithmetic, and serialized values are the
shortest decimal that reproduces the float, so a record survives any number
of write/read cycles unchanged.
"""

from __future__ import annotations

import csv
import decimal
import logging
import math
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .boxes import BoundingBox

log = logging.getLogger(__name__)

PROVENANCES = ("human", "pseudo")
_EXACT = decimal.Context(prec=1200)


class VocError(ValueError):
    """Malformed or invalid VOC annotation."""


@dataclass(frozen=True)
class Annotation:
    name: str
    box: BoundingBox
    difficult: bool = False
    score: float | None = None  # set on pseudo-labels only


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: int
    height: int
    annotations: tuple[Annotation, ...] = ()
    filename: str = ""
    depth: int = 3
    provenance: str = "human"

    def __post_init__(self):
        object.__setattr__(self, "annotations", tuple(self.annotations))
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"{self.image_id}: image size must be positive")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        for i, ann in enumerate(self.annotations):
            b = ann.box
            if b.x_min < 0 or b.y_min < 0 or b.x_max > self.width or b.y_max > self.height:
                raise ValueError(f"{self.image_id}: object {i} lies outside the image")

    @property
    def boxes(self) -> np.ndarray:
        return np.array([a.box.as_list() for a in self.annotations], dtype=np.float64).reshape(-1, 4)


def _to_float(text: str | None, what: str, offset: int = 0) -> float:
    if text is None:
        raise VocError(f"missing {what}")
    try:
        value = _EXACT.subtract(decimal.Decimal(text.strip()), decimal.Decimal(offset))
    except decimal.InvalidOperation:
        raise VocError(f"{what} is not a number: {text!r}") from None
    result = float(value)
    if not math.isfinite(result):
        raise VocError(f"{what} is not finite: {text!r}")
    return result


def _format_coord(value: float, offset: int = 0) -> str:
    """Shortest decimal ``s`` with ``float(Decimal(s) - offset) == value``."""
    shifted = value + offset
    candidate = str(int(shifted)) if shifted.is_integer() else repr(shifted)
    if float(_EXACT.subtract(decimal.Decimal(candidate), decimal.Decimal(offset))) == value:
        return candidate
    exact = _EXACT.add(decimal.Decimal(value), decimal.Decimal(offset))
    return format(exact, "f")


def _text(node: ET.Element, path: str) -> str | None:
    found = node.find(path)
    return None if found is None or found.text is None else found.text.strip()


def parse_voc_string(text: str, image_id: str, warnings: Counter | None = None,
                     source: str = "<string>") -> ImageRecord:
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise VocError(f"{source}: malformed XML: {exc}") from None
    try:
        return _parse_root(root, image_id, warnings, source)
    except VocError as exc:
        raise VocError(f"{source}: {exc}") from None
    except (ValueError, TypeError, ArithmeticError) as exc:
        raise VocError(f"{source}: {exc}") from None


def _parse_int(text: str | None, what: str) -> int:
    if text is None:
        raise VocError(f"missing {what}")
    try:
        value = float(text)
    except ValueError:
        raise VocError(f"{what} is not a number: {text!r}") from None
    if not value.is_integer():
        raise VocError(f"{what} is not an integer: {text!r}")
    return int(value)


def _parse_root(root: ET.Element, image_id: str, warnings: Counter | None, source: str) -> ImageRecord:
    if root.tag != "annotation":
        raise VocError(f"root element is <{root.tag}>, expected <annotation>")
    size = root.find("size")
    if size is None:
        raise VocError("missing <size> element")
    width = _parse_int(_text(size, "width"), "size/width")
    height = _parse_int(_text(size, "height"), "size/height")
    depth_text = _text(size, "depth")
    depth = _parse_int(depth_text, "size/depth") if depth_text else 3
    if width <= 0 or height <= 0:
        raise VocError(f"non-positive image size {width}x{height}")
    provenance = _text(root, "source/annotation")
    provenance = provenance if provenance in PROVENANCES else "human"

    annotations = []
    for index, obj in enumerate(root.findall("object")):
        name = _text(obj, "name")
        if not name:
            raise VocError(f"object {index}: missing <name>")
        bnd = obj.find("bndbox")
        if bnd is None:
            raise VocError(f"object {index}: missing <bndbox>")
        raw = {k: _text(bnd, k) for k in ("xmin", "ymin", "xmax", "ymax")}
        x0 = _to_float(raw["xmin"], f"object {index} xmin", offset=1)
        y0 = _to_float(raw["ymin"], f"object {index} ymin", offset=1)
        x1 = _to_float(raw["xmax"], f"object {index} xmax")
        y1 = _to_float(raw["ymax"], f"object {index} ymax")
        for lo, hi in (("xmin", "xmax"), ("ymin", "ymax")):
            if _EXACT.subtract(decimal.Decimal(raw[lo]), 1) > decimal.Decimal(raw[hi]):
                raise VocError(f"object {index}: {lo} {raw[lo]} > {hi} {raw[hi]}")
        clamped = (min(max(x0, 0.0), width), min(max(y0, 0.0), height),
                   min(max(x1, 0.0), width), min(max(y1, 0.0), height))
        if clamped != (x0, y0, x1, y1):
            if warnings is not None:
                warnings["clamped"] += 1
            log.warning("%s: object %d clamped to image bounds", source, index)
        empty_after_clamp = (clamped[0] == clamped[2] and x0 < x1) or (clamped[1] == clamped[3] and y0 < y1)
        if empty_after_clamp:
            raise VocError(f"object {index}: box lies entirely outside the image")
        difficult_text = _text(obj, "difficult")
        difficult = bool(_parse_int(difficult_text, f"object {index} difficult")) if difficult_text else False
        score_text = _text(obj, "score")
        score = _to_float(score_text, f"object {index} score") if score_text else None
        annotations.append(Annotation(name, BoundingBox(*clamped), difficult, score))
    return ImageRecord(image_id, width, height, tuple(annotations), _text(root, "filename") or "",
                       depth, provenance)


def parse_voc_file(path: str | Path, warnings: Counter | None = None) -> ImageRecord:
    path = Path(path)
    try:
        text = path.read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise VocError(f"{path}: cannot read: {exc}") from None
    return parse_voc_string(text, path.stem, warnings, str(path))


def parse_voc(xml_dir: str | Path, warnings: Counter | None = None) -> list[ImageRecord]:
    """One record per ``*.xml`` file, sorted by file name; image_id is the file stem."""
    xml_dir = Path(xml_dir)
    if not xml_dir.is_dir():
        raise VocError(f"{xml_dir}: not a directory")
    return [parse_voc_file(p, warnings) for p in sorted(xml_dir.glob("*.xml"))]


def record_to_xml(record: ImageRecord) -> str:
    root = ET.Element("annotation")
    ET.SubElement(root, "folder").text = "images"
    ET.SubElement(root, "filename").text = record.filename
    source = ET.SubElement(root, "source")
    ET.SubElement(source, "database").text = "ATRW"
    ET.SubElement(source, "annotation").text = record.provenance
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(record.width)
    ET.SubElement(size, "height").text = str(record.height)
    ET.SubElement(size, "depth").text = str(record.depth)
    ET.SubElement(root, "segmented").text = "0"
    for ann in record.annotations:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = ann.name
        ET.SubElement(obj, "pose").text = "Unspecified"
        ET.SubElement(obj, "truncated").text = "0"
        ET.SubElement(obj, "difficult").text = "1" if ann.difficult else "0"
        if ann.score is not None:
            ET.SubElement(obj, "score").text = repr(float(ann.score))
        bnd = ET.SubElement(obj, "bndbox")
        ET.SubElement(bnd, "xmin").text = _format_coord(ann.box.x_min, 1)
        ET.SubElement(bnd, "ymin").text = _format_coord(ann.box.y_min, 1)
        ET.SubElement(bnd, "xmax").text = _format_coord(ann.box.x_max)
        ET.SubElement(bnd, "ymax").text = _format_coord(ann.box.y_max)
    ET.indent(root, space="\t")
    return ET.tostring(root, encoding="unicode") + "\n"


def serialize_voc(records: Iterable[ImageRecord], out_dir: str | Path) -> list[Path]:
    """Write ``<image_id>.xml`` per record; returns the written paths."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise VocError(f"{out_dir}: cannot create output directory: {exc}") from None
    written = []
    for record in records:
        path = out_dir / f"{record.image_id}.xml"
        try:
            path.write_text(record_to_xml(record))
        except OSError as exc:
            raise VocError(f"{path}: cannot write: {exc}") from None
        written.append(path)
    return written


def split_dataset(records: Sequence[ImageRecord], train_fraction: float = 0.8,
                  seed: int = 0) -> tuple[list[ImageRecord], list[ImageRecord]]:
    """Random image-level split; both parts keep the input order."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    n = len(records)
    if n < 2:
        raise ValueError("need at least two records to split")
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = set(perm[:n_train].tolist())
    train = [r for i, r in enumerate(records) if i in train_idx]
    val = [r for i, r in enumerate(records) if i not in train_idx]
    return train, val


@dataclass(frozen=True)
class DatasetStats:
    num_images: int
    num_boxes: int
    resolutions: dict[tuple[int, int], int] = field(default_factory=dict)
    boxes_per_class: dict[str, int] = field(default_factory=dict)

    def to_csv(self) -> str:
        lines = ["metric,key,value", f"images,,{self.num_images}", f"boxes,,{self.num_boxes}"]
        lines += [f"resolution,{w}x{h},{c}" for (w, h), c in sorted(self.resolutions.items())]
        lines += [f"class,{name},{c}" for name, c in sorted(self.boxes_per_class.items())]
        return "\n".join(lines) + "\n"


def dataset_stats(records: Sequence[ImageRecord]) -> DatasetStats:
    res = Counter((r.width, r.height) for r in records)
    classes = Counter(a.name for r in records for a in r.annotations)
    return DatasetStats(len(records), sum(len(r.annotations) for r in records), dict(res), dict(classes))


def read_image_sizes(path: str | Path) -> dict[str, tuple[int, int]]:
    """``image_id,width,height`` CSV into ``{image_id: (width, height)}``."""
    sizes: dict[str, tuple[int, int]] = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), 2):
            try:
                image_id = row["image_id"]
                w, h = int(row["width"]), int(row["height"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad size row ({exc})") from None
            if image_id in sizes:
                raise ValueError(f"{path}:{lineno}: duplicate image_id {image_id!r}")
            sizes[image_id] = (w, h)
    return sizes


def write_image_sizes(sizes: dict[str, tuple[int, int]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "width", "height"])
        for image_id, (w, h) in sizes.items():
            writer.writerow([image_id, w, h])


def with_provenance(records: Iterable[ImageRecord], provenance: str) -> list[ImageRecord]:
    return [replace(r, provenance=provenance) for r in records]


def list_ids(records: Iterable[ImageRecord]) -> str:
    return "".join(f"{r.image_id}\n" for r in records)

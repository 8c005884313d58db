"""Anchor lattices, box encoding, ground-truth assignment and hard-negative selection.

Anchor order within a level is row-major over cells, then scale, then aspect
ratio: ``index = ((i * W + j) * S + s) * R + r``.  Head tensors use the matching
channel layout ``anchor * K + class`` (class logits) and ``anchor * 4 + coord``
(box offsets).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boxes import BoundingBox, iou_matrix

NEGATIVE = -1
IGNORE = -2

# exp() argument cap in decode; keeps wild regressions finite
MAX_LOG_SCALE = math.log(1000.0 / 16.0)


@dataclass(frozen=True)
class AnchorGrid:
    level: int
    stride: int
    shape: tuple[int, int]
    anchors: np.ndarray  # (H * W * A, 4)
    size: float
    scales: tuple[float, ...]
    ratios: tuple[float, ...]

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)

    def boxes(self) -> list[BoundingBox]:
        return [BoundingBox.from_array(row) for row in self.anchors]


def cell_anchor_shapes(size: float, scales: Sequence[float], ratios: Sequence[float]) -> np.ndarray:
    """(A, 2) widths and heights; ratio is height / width at constant area."""
    out = []
    for scale in scales:
        for ratio in ratios:
            side = size * scale
            out.append((side / math.sqrt(ratio), side * math.sqrt(ratio)))
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def generate_anchors(shapes: Sequence[tuple[int, int]], strides: Sequence[int], sizes: Sequence[float],
                     scales: Sequence[float] = (1.0,), ratios: Sequence[float] = (1.0,)) -> list[AnchorGrid]:
    """One anchor grid per level, centred on ``((j + 0.5) * stride, (i + 0.5) * stride)``.

    Anchors are not clipped to the image.
    """
    if not (len(shapes) == len(strides) == len(sizes)):
        raise ValueError("shapes, strides and sizes must have one entry per level")
    if not scales or not ratios:
        raise ValueError("need at least one scale and one ratio")
    grids = []
    for level, ((h, w), stride, size) in enumerate(zip(shapes, strides, sizes)):
        if h <= 0 or w <= 0:
            raise ValueError(f"level {level} has empty shape {(h, w)}")
        wh = cell_anchor_shapes(size, scales, ratios)
        cy, cx = np.meshgrid((np.arange(h) + 0.5) * stride, (np.arange(w) + 0.5) * stride, indexing="ij")
        centres = np.stack([cx.ravel(), cy.ravel()], axis=1)  # (H*W, 2)
        half = wh / 2.0
        lo = centres[:, None, :] - half[None, :, :]
        hi = centres[:, None, :] + half[None, :, :]
        anchors = np.concatenate([lo, hi], axis=2).reshape(-1, 4)
        grids.append(AnchorGrid(level, int(stride), (int(h), int(w)), anchors, float(size),
                                tuple(scales), tuple(ratios)))
    return grids


def anchors_for_graph(graph, config) -> list[AnchorGrid]:
    """Anchor grids matching the pyramid levels of a built graph."""
    from .architecture import LEVEL_STRIDES, level_shapes

    return generate_anchors(level_shapes(graph), LEVEL_STRIDES, config.anchor_sizes,
                            config.anchor_scales, config.anchor_ratios)


def concat_anchors(grids: Sequence[AnchorGrid]) -> np.ndarray:
    return np.concatenate([g.anchors for g in grids], axis=0)


def anchors_to_csv(grids: Sequence[AnchorGrid]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["level", "index", "x_min", "y_min", "x_max", "y_max"])
    for g in grids:
        for i, row in enumerate(g.anchors):
            writer.writerow([g.level, i, *(repr(float(v)) for v in row)])
    return buf.getvalue()


def _centre_size(boxes: np.ndarray):
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + 0.5 * w, boxes[:, 1] + 0.5 * h, w, h


def encode_boxes(anchors: np.ndarray, gts: np.ndarray, variances=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    """Centre/log-size offsets of ``gts`` relative to ``anchors`` (both (N, 4))."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    acx, acy, aw, ah = _centre_size(anchors)
    gcx, gcy, gw, gh = _centre_size(gts)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchors must have positive width and height")
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise ValueError("cannot encode a box with non-positive width or height")
    v = np.asarray(variances, dtype=np.float64)
    return np.stack([
        (gcx - acx) / aw / v[0],
        (gcy - acy) / ah / v[1],
        np.log(gw / aw) / v[2],
        np.log(gh / ah) / v[3],
    ], axis=1)


def decode_boxes(anchors: np.ndarray, offsets: np.ndarray, variances=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    if not np.all(np.isfinite(offsets)):
        raise ValueError("offsets must be finite")
    acx, acy, aw, ah = _centre_size(anchors)
    v = np.asarray(variances, dtype=np.float64)
    cx = offsets[:, 0] * v[0] * aw + acx
    cy = offsets[:, 1] * v[1] * ah + acy
    w = aw * np.exp(np.minimum(offsets[:, 2] * v[2], MAX_LOG_SCALE))
    h = ah * np.exp(np.minimum(offsets[:, 3] * v[3], MAX_LOG_SCALE))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def encode_box(anchor: BoundingBox, gt: BoundingBox, variances=(1.0, 1.0, 1.0, 1.0)) -> tuple[float, ...]:
    return tuple(float(v) for v in encode_boxes(anchor.as_array(), gt.as_array(), variances)[0])


def decode_box(anchor: BoundingBox, offsets, variances=(1.0, 1.0, 1.0, 1.0)) -> BoundingBox:
    return BoundingBox.from_array(decode_boxes(anchor.as_array(), np.asarray(offsets, float), variances)[0])


@dataclass(frozen=True)
class MatchResult:
    """Per-anchor assignment: ``labels[i]`` is a gt index (positive), NEGATIVE or IGNORE."""

    labels: np.ndarray
    targets: np.ndarray  # (N, 4); zero rows for non-positive anchors
    max_iou: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def negative(self) -> np.ndarray:
        return self.labels == NEGATIVE

    @property
    def ignored(self) -> np.ndarray:
        return self.labels == IGNORE

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())

    @property
    def num_negative(self) -> int:
        return int(self.negative.sum())


def match_anchors(anchors: np.ndarray, gts: np.ndarray, pos_iou: float = 0.5, neg_iou: float = 0.4,
                  variances=(1.0, 1.0, 1.0, 1.0)) -> MatchResult:
    """Threshold assignment plus a forced best anchor per ground truth.

    An anchor is positive when its best IoU is at least ``pos_iou``, negative
    below ``neg_iou`` and ignored in between.  Each ground truth (in order) then
    claims its highest-IoU anchor (lowest index on ties) if that IoU is
    positive; an anchor already claimed by an earlier ground truth passes the
    claim to the next-best unclaimed anchor.
    """
    if not pos_iou > neg_iou:
        raise ValueError("pos_iou must exceed neg_iou")
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    n = len(anchors)
    labels = np.full(n, NEGATIVE, dtype=np.int64)
    targets = np.zeros((n, 4))
    if len(gts) == 0:
        return MatchResult(labels, targets, np.zeros(n))
    overlaps = iou_matrix(anchors, gts)  # (N, G)
    best_gt = np.argmax(overlaps, axis=1)
    best_iou = overlaps[np.arange(n), best_gt]
    labels[best_iou >= neg_iou] = IGNORE
    pos = best_iou >= pos_iou
    labels[pos] = best_gt[pos]

    claimed: set[int] = set()
    index = np.arange(n)
    for g in range(len(gts)):
        col = overlaps[:, g]
        candidates = np.flatnonzero(col > 0.0)
        if len(candidates) == 0:
            continue
        order = candidates[np.lexsort((index[candidates], -col[candidates]))]
        for a in order:
            if int(a) not in claimed:
                claimed.add(int(a))
                labels[a] = g
                break

    pos = labels >= 0
    if np.any(pos):
        targets[pos] = encode_boxes(anchors[pos], gts[labels[pos]], variances)
    return MatchResult(labels, targets, best_iou)


def top_k_negatives(per_anchor_loss: np.ndarray, negative_mask: np.ndarray, k: int) -> np.ndarray:
    """Indices (ascending) of the ``k`` largest-loss negatives; ties go to the lower index."""
    candidates = np.flatnonzero(negative_mask)
    k = min(int(k), len(candidates))
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    loss = np.asarray(per_anchor_loss, dtype=np.float64)[candidates]
    order = np.lexsort((candidates, -loss))
    return np.sort(candidates[order[:k]])


def select_hard_negatives(per_anchor_cls_loss: np.ndarray, match: MatchResult, eta: float = 3.0) -> np.ndarray:
    """The ``min(floor(eta * P), N)`` negatives with the largest classification loss."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    loss = np.asarray(per_anchor_cls_loss, dtype=np.float64)
    if not np.all(np.isfinite(loss)):
        raise ValueError("classification losses must be finite")
    k = int(math.floor(eta * match.num_positive))
    return top_k_negatives(loss, match.negative, k)

"""Classification and box-regression losses with analytic gradients.

Normalisation: cross-entropy is averaged over contributing anchors (positives
plus selected hard negatives); smooth L1 is summed over the four coordinates
and averaged over positives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .anchors import IGNORE, NEGATIVE, MatchResult, select_hard_negatives, top_k_negatives

BACKGROUND = 0


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean of ``-log p[label]`` over rows, and its gradient w.r.t. ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise ValueError("probs must be (N, M) with M >= 2")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1")
    rows = np.arange(len(labels))
    picked = probs[rows, labels]
    if np.any(picked <= 0.0):
        raise ValueError("probability at a labelled class is not positive")
    n = len(labels)
    grad = np.zeros_like(probs)
    if n == 0:
        return 0.0, grad
    grad[rows, labels] = -1.0 / (n * picked)
    return float(-np.log(picked).sum() / n), grad


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits); gradient w.r.t. the logits is ``(p - onehot) / n``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    grad = np.zeros_like(logits)
    if n == 0:
        return 0.0, grad
    logp = log_softmax(logits)
    rows = np.arange(n)
    grad[:] = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(-logp[rows, labels].sum() / n), grad / n


def smooth_l1_elementwise(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1(residuals) -> tuple[float, np.ndarray]:
    """Smooth L1 summed over coordinates (last axis) and averaged over rows.

    A scalar or 1-D input counts as a single row.
    """
    x = np.asarray(residuals, dtype=np.float64)
    rows = x.reshape(-1, x.shape[-1]) if x.ndim >= 1 else x.reshape(1, 1)
    n = rows.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(x)
    loss = smooth_l1_elementwise(rows).sum() / n
    grad = np.where(np.abs(rows) < 1.0, rows, np.sign(rows)) / n
    return float(loss), grad.reshape(x.shape)


@dataclass(frozen=True)
class LossReport:
    cls_loss: float
    box_loss: float
    total: float
    box_weight: float
    num_positive: int
    num_negative_selected: int
    grad_cls_logits: np.ndarray = field(repr=False)
    grad_box_deltas: np.ndarray = field(repr=False)
    selected_negatives: np.ndarray = field(repr=False)
    normalization: str = "mean"

    CSV_HEADER = "cls_loss,box_loss,total,box_weight,num_positive,num_negative_selected,normalization"

    def to_csv_row(self) -> str:
        return (
            f"{self.cls_loss!r},{self.box_loss!r},{self.total!r},{self.box_weight!r},"
            f"{self.num_positive},{self.num_negative_selected},{self.normalization}"
        )


def per_anchor_background_loss(cls_logits: np.ndarray) -> np.ndarray:
    """``-log p(background)`` per anchor, the ranking key for hard-negative mining."""
    return -log_softmax(cls_logits)[:, BACKGROUND]


def detection_loss(cls_logits: np.ndarray, box_deltas: np.ndarray, match: MatchResult,
                   eta: float = 3.0, box_weight: float = 1.0, min_negatives: int = 8,
                   gt_classes: np.ndarray | None = None) -> LossReport:
    """Hard-negative-mined cross-entropy plus smooth-L1 box loss for one image.

    ``cls_logits`` is (N, K) with class 0 = background and ``box_deltas`` is
    (N, 4), both in anchor order.  Positives are labelled ``gt_classes[gt] + 1``
    (class 1 when ``gt_classes`` is omitted).  With no positives the
    classification term falls back to the ``min_negatives`` hardest negatives.
    """
    cls_logits = np.asarray(cls_logits, dtype=np.float64)
    box_deltas = np.asarray(box_deltas, dtype=np.float64)
    n = len(match.labels)
    if cls_logits.shape[0] != n or box_deltas.shape != (n, 4):
        raise ValueError(f"expected {n} anchors; got logits {cls_logits.shape}, deltas {box_deltas.shape}")
    if np.isnan(cls_logits).any() or np.isnan(box_deltas).any():
        raise ValueError("NaN in head outputs")

    pos = np.flatnonzero(match.positive)
    neg_loss = per_anchor_background_loss(cls_logits)
    if len(pos):
        hard = select_hard_negatives(neg_loss, match, eta)
    else:
        hard = top_k_negatives(neg_loss, match.negative, min_negatives)

    gt_idx = match.labels[pos]
    if gt_classes is None:
        pos_labels = np.ones(len(pos), dtype=np.int64)
    else:
        pos_labels = np.asarray(gt_classes, dtype=np.int64)[gt_idx] + 1
    contrib = np.concatenate([pos, hard])
    labels = np.concatenate([pos_labels, np.full(len(hard), BACKGROUND, dtype=np.int64)])
    cls_loss, g_contrib = softmax_cross_entropy(cls_logits[contrib], labels)
    grad_cls = np.zeros_like(cls_logits)
    grad_cls[contrib] = g_contrib

    residuals = box_deltas[pos] - match.targets[pos]
    box_loss, g_res = smooth_l1(residuals) if len(pos) else (0.0, np.zeros((0, 4)))
    grad_box = np.zeros_like(box_deltas)
    grad_box[pos] = box_weight * g_res

    return LossReport(
        cls_loss=cls_loss,
        box_loss=box_loss,
        total=cls_loss + box_weight * box_loss,
        box_weight=float(box_weight),
        num_positive=len(pos),
        num_negative_selected=len(hard),
        grad_cls_logits=grad_cls,
        grad_box_deltas=grad_box,
        selected_negatives=hard,
    )


def gradient_check(cls_logits: np.ndarray, box_deltas: np.ndarray, match: MatchResult, step: float = 1e-5,
                   seam_margin: float = 1e-6, **loss_kw) -> float:
    """Largest relative error between analytic and central-difference gradients of the total loss.

    Box coordinates whose residual lies within ``seam_margin`` of the smooth-L1
    seam ``|x| = 1`` are skipped.
    """
    report = detection_loss(cls_logits, box_deltas, match, **loss_kw)
    worst = 0.0

    def total(c, b):
        return detection_loss(c, b, match, **loss_kw).total

    for which, base, analytic in (("cls", cls_logits, report.grad_cls_logits),
                                  ("box", box_deltas, report.grad_box_deltas)):
        base = np.asarray(base, dtype=np.float64)
        for idx in np.ndindex(base.shape):
            if which == "box" and match.labels[idx[0]] >= 0:
                residual = base[idx] - match.targets[idx]
                if abs(abs(residual) - 1.0) < seam_margin:
                    continue
            plus, minus = base.copy(), base.copy()
            plus[idx] += step
            minus[idx] -= step
            if which == "cls":
                numeric = (total(plus, box_deltas) - total(minus, box_deltas)) / (2 * step)
            else:
                numeric = (total(cls_logits, plus) - total(cls_logits, minus)) / (2 * step)
            a = analytic[idx]
            scale = max(abs(a), abs(numeric))
            if scale < 1e-10:
                continue
            worst = max(worst, abs(a - numeric) / scale)
    return worst


def random_loss_instance(rng: np.random.Generator, num_anchors: int = 24, num_classes: int = 2,
                         num_gts: int = 3):
    """Random (logits, deltas, match) triple for gradient verification.

    About a quarter of anchors are positive and a sixth ignored; residuals
    straddle both smooth-L1 branches.
    """
    u = rng.random(num_anchors)
    labels = np.where(u < 0.25, rng.integers(0, num_gts, num_anchors), NEGATIVE)
    labels = np.where((u >= 0.25) & (u < 0.42), IGNORE, labels).astype(np.int64)
    targets = np.where((labels >= 0)[:, None], rng.normal(0.0, 0.5, (num_anchors, 4)), 0.0)
    match = MatchResult(labels, targets, np.zeros(num_anchors))
    logits = rng.normal(0.0, 2.0, (num_anchors, num_classes))
    deltas = rng.normal(0.0, 1.0, (num_anchors, 4))
    return logits, deltas, match

import math

import numpy as np
import pytest

from tigernet.anchors import IGNORE, NEGATIVE, MatchResult
from tigernet.losses import (
    LossReport,
    cross_entropy,
    detection_loss,
    gradient_check,
    random_loss_instance,
    smooth_l1,
    softmax,
    softmax_cross_entropy,
)

from oracles import detection_loss_reference


def make_match(labels, targets=None):
    labels = np.asarray(labels, dtype=np.int64)
    if targets is None:
        targets = np.zeros((len(labels), 4))
    return MatchResult(labels, np.asarray(targets, dtype=float), np.zeros(len(labels)))


class TestCrossEntropy:
    def test_certain_prediction(self):
        loss, _ = cross_entropy(np.array([[0.0, 1.0]]), np.array([1]))
        assert loss == 0.0

    def test_inverse_e(self):
        p = math.exp(-1)
        loss, _ = cross_entropy(np.array([[1 - p, p]]), np.array([1]))
        assert loss == pytest.approx(1.0, abs=1e-12)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(0)
        probs = rng.dirichlet(np.ones(3), size=5)
        labels = rng.integers(0, 3, 5)
        _, grad = cross_entropy(probs, labels)
        h = 1e-7
        for idx in np.ndindex(probs.shape):
            up, down = probs.copy(), probs.copy()
            up[idx] += h
            down[idx] -= h
            # rows no longer normalised, so evaluate the raw objective
            f = lambda p: -np.log(p[np.arange(5), labels]).mean()
            assert grad[idx] == pytest.approx((f(up) - f(down)) / (2 * h), rel=1e-5, abs=1e-9)

    def test_rejects_unnormalised(self):
        with pytest.raises(ValueError):
            cross_entropy(np.array([[0.3, 0.3]]), np.array([0]))

    def test_rejects_zero_probability(self):
        with pytest.raises(ValueError):
            cross_entropy(np.array([[1.0, 0.0]]), np.array([1]))

    def test_softmax_form_matches(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(6, 2))
        labels = rng.integers(0, 2, 6)
        a, _ = softmax_cross_entropy(logits, labels)
        b, _ = cross_entropy(softmax(logits), labels)
        assert a == pytest.approx(b, rel=1e-12)

    def test_softmax_stable_for_large_logits(self):
        loss, grad = softmax_cross_entropy(np.array([[1000.0, -1000.0]]), np.array([0]))
        assert loss == 0.0 and np.isfinite(grad).all()


class TestSmoothL1:
    @pytest.mark.parametrize("x,expected", [(0.5, 0.125), (2.0, 1.5), (-2.0, 1.5), (1.0, 0.5), (0.0, 0.0)])
    def test_values(self, x, expected):
        assert smooth_l1(x)[0] == expected

    def test_continuous_at_seam(self):
        below = smooth_l1(1 - 1e-9)[0]
        above = smooth_l1(1 + 1e-9)[0]
        assert abs(below - above) < 1e-8

    def test_sum_over_coords_mean_over_rows(self):
        loss, grad = smooth_l1(np.array([[0.5, 0, 0, 0], [2.0, 0, 0, 0]]))
        assert loss == pytest.approx((0.125 + 1.5) / 2)
        np.testing.assert_allclose(grad[:, 0], [0.25, 0.5])


class TestDetectionLoss:
    def test_perfect_predictions(self):
        match = make_match([0, NEGATIVE, NEGATIVE, NEGATIVE], np.ones((4, 4)) * 0.3)
        logits = np.array([[-50.0, 50.0], [50.0, -50.0], [50.0, -50.0], [50.0, -50.0]])
        report = detection_loss(logits, np.ones((4, 4)) * 0.3, match)
        assert report.cls_loss < 1e-12
        assert report.box_loss == 0.0

    def test_box_term_scaled(self):
        match = make_match([0, NEGATIVE])
        deltas = np.zeros((2, 4))
        deltas[0, 0] = 0.5
        for lam in (1.0, 2.0, 0.25):
            report = detection_loss(np.zeros((2, 2)), deltas, match, box_weight=lam)
            assert report.box_loss == 0.125
            assert report.total == pytest.approx(report.cls_loss + lam * 0.125)

    def test_counts_with_two_positives(self):
        labels = [0, 0] + [NEGATIVE] * 10 + [IGNORE] * 3
        report = detection_loss(np.zeros((15, 2)), np.zeros((15, 4)), make_match(labels))
        assert report.num_positive == 2
        assert report.num_negative_selected == 6

    def test_zero_positive_fallback(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(20, 2))
        report = detection_loss(logits, np.zeros((20, 4)), make_match([NEGATIVE] * 20))
        assert report.num_negative_selected == 8
        assert report.box_loss == 0.0
        assert report.cls_loss > 0

    def test_all_ignored(self):
        report = detection_loss(np.zeros((3, 2)), np.zeros((3, 4)), make_match([IGNORE] * 3))
        assert report.total == 0.0
        assert not report.grad_cls_logits.any()

    def test_against_reference(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(1, 40))
            logits, deltas, match = random_loss_instance(rng, num_anchors=n)
            eta = float(rng.choice([1.0, 2.0, 3.0]))
            lam = float(rng.uniform(0.1, 3))
            got = detection_loss(logits, deltas, match, eta=eta, box_weight=lam)
            cls, box, total, hard = detection_loss_reference(logits, deltas, match.labels, match.targets,
                                                             eta=eta, box_weight=lam)
            assert got.cls_loss == pytest.approx(cls, rel=1e-12, abs=1e-14)
            assert got.box_loss == pytest.approx(box, rel=1e-12, abs=1e-14)
            assert got.total == pytest.approx(total, rel=1e-12, abs=1e-14)
            assert list(got.selected_negatives) == hard

    def test_ignored_anchors_have_no_effect(self):
        rng = np.random.default_rng(11)
        logits, deltas, match = random_loss_instance(rng, num_anchors=40)
        ignored = match.labels == IGNORE
        assert ignored.any()
        base = detection_loss(logits, deltas, match)
        l2, d2 = logits.copy(), deltas.copy()
        l2[ignored] = rng.normal(0, 50, (ignored.sum(), 2))
        d2[ignored] = rng.normal(0, 50, (ignored.sum(), 4))
        other = detection_loss(l2, d2, match)
        assert other.total == base.total
        np.testing.assert_array_equal(other.grad_cls_logits[~ignored], base.grad_cls_logits[~ignored])
        assert not other.grad_cls_logits[ignored].any() and not other.grad_box_deltas[ignored].any()

    def test_non_negative(self):
        rng = np.random.default_rng(13)
        for _ in range(200):
            logits, deltas, match = random_loss_instance(rng, num_anchors=int(rng.integers(1, 30)))
            report = detection_loss(logits, deltas, match)
            assert report.cls_loss >= 0 and report.box_loss >= 0 and report.total >= 0

    def test_gradient_check_fifty_instances(self):
        rng = np.random.default_rng(17)
        worst = max(gradient_check(*random_loss_instance(rng)) for _ in range(50))
        assert worst < 1e-4

    def test_nan_rejected(self):
        logits = np.zeros((2, 2))
        logits[1, 0] = np.nan
        with pytest.raises(ValueError):
            detection_loss(logits, np.zeros((2, 4)), make_match([0, NEGATIVE]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            detection_loss(np.zeros((3, 2)), np.zeros((2, 4)), make_match([0, NEGATIVE]))

    def test_gt_classes_shift_label(self):
        match = make_match([0, 1])
        logits = np.array([[0.0, 0.0, 9.0], [0.0, 9.0, 0.0]])
        good = detection_loss(logits, np.zeros((2, 4)), match, gt_classes=np.array([1, 0]))
        bad = detection_loss(logits, np.zeros((2, 4)), match, gt_classes=np.array([0, 1]))
        assert good.cls_loss < bad.cls_loss

    def test_csv_row(self):
        report = detection_loss(np.zeros((2, 2)), np.zeros((2, 4)), make_match([0, NEGATIVE]))
        fields = report.to_csv_row().split(",")
        assert len(fields) == len(LossReport.CSV_HEADER.split(","))
        assert float(fields[0]) == report.cls_loss
        assert fields[-1] == "mean"

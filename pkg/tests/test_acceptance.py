"""Acceptance criteria, one test each.

Every test records a one-line PASS/FAIL verdict; the lines are printed in the
pytest terminal summary, or directly when this file is run as a script.
"""

import json
import math
import time

import numpy as np

from tigernet.anchors import NEGATIVE, MatchResult, match_anchors, select_hard_negatives
from tigernet.architecture import build_tigernet, default_config
from tigernet.augment_geom import place_cutout
from tigernet.boxes import BoundingBox
from tigernet.data_io import parse_voc, serialize_voc, split_dataset
from tigernet.evaluation import average_precision
from tigernet.losses import detection_loss, gradient_check, random_loss_instance, smooth_l1
from tigernet.model_graph import count_cost, downsampling_factors, init_weights, sweep_input_size
from tigernet.postprocess import Detection, blend_nms, blend_nms_with_seeds, greedy_nms_indices
from tigernet.pseudo_label import predictions_to_labels

from oracles import ap_by_prefix_enumeration, iou_exact, match_for_ap, nms_by_subset_enumeration, weighted_box_mean
from test_cli import VAL_DETS, read_voc_oracle, run_pipeline, tree_bytes
from test_data_io import random_record
from test_evaluation import oracle_ap, random_instance, to_objects
from test_postprocess import suite

RESULTS: dict[int, str] = {}
TARGET_PARAMS = 600_000
TARGET_GFLOPS = 0.071
SWEEP = range(128, 321, 32)


def verdict(number, ok, detail):
    RESULTS[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, RESULTS[number]


def test_1_architecture_budget():
    start = time.perf_counter()
    graph = build_tigernet()
    report = count_cost(graph)
    elapsed = time.perf_counter() - start
    rows = report.to_csv().splitlines()[1:]
    header = report.to_csv().splitlines()[0].split(",")
    col = header.index("params")
    csv_sum = sum(int(r.split(",")[col]) for r in rows)
    rel = report.total_params / TARGET_PARAMS - 1
    ok = abs(rel) <= 0.10 and csv_sum == report.total_params and elapsed < 1.0
    verdict(1, ok, f"params {report.total_params:,} ({rel:+.1%} vs 600k), CSV sum {csv_sum:,}, {elapsed:.3f}s")


def test_2_flops_calibration():
    result = sweep_input_size(lambda s: build_tigernet(default_config(input_size=(s, s))), TARGET_GFLOPS * 1e9,
                              SWEEP, mac_flops=2)
    flops = [f for _, f, _ in result.rows]
    monotone = all(a < b for a, b in zip(flops, flops[1:]))
    best = dict((s, f) for s, f, _ in result.rows)[result.best_size] / 1e9
    rel = best / TARGET_GFLOPS - 1
    ok = monotone and abs(rel) <= 0.20
    verdict(2, ok, f"monotone={monotone}, best size {result.best_size}: {best:.4f} GFLOPs "
                   f"({rel:+.1%} vs 0.071, 1 MAC = 2 FLOPs)")


def test_3_stride_schedule():
    factors = tuple(int(f) for f in downsampling_factors(build_tigernet()))
    verdict(3, factors == (8, 16, 32, 32, 32, 32), f"head strides {factors}")


def test_4_loss_correctness():
    rng = np.random.default_rng(2024)
    worst = max(gradient_check(*random_loss_instance(rng)) for _ in range(50))
    at_half = smooth_l1(0.5)[0]
    quadratic_at_one, linear_at_one = 0.5 * 1.0 * 1.0, abs(1.0) - 0.5
    ok = worst < 1e-4 and at_half == 0.125 and quadratic_at_one == linear_at_one == smooth_l1(1.0)[0]
    verdict(4, ok, f"max rel grad error {worst:.2e} over 50 instances, smooth_l1(0.5)={at_half}, "
                   f"branches at |x|=1: {quadratic_at_one} / {linear_at_one}")


def test_5_hard_negative_rule():
    rng = np.random.default_rng(5)
    count_ok = invariant_ok = True
    trials = 0
    while trials < 500:
        logits, deltas, match = random_loss_instance(rng, num_anchors=int(rng.integers(4, 60)))
        p, n = match.num_positive, match.num_negative
        if p == 0:
            continue
        trials += 1
        report = detection_loss(logits, deltas, match, eta=3.0)
        count_ok &= report.num_negative_selected == min(3 * p, n)
        # make every non-selected negative easier; it stays out and must not move the loss
        rest = np.setdiff1d(np.flatnonzero(match.negative), report.selected_negatives)
        perturbed = logits.copy()
        perturbed[rest, 0] += rng.uniform(0.1, 5.0, len(rest))
        perturbed[rest, 1:] -= rng.uniform(0.0, 5.0, (len(rest), logits.shape[1] - 1))
        again = detection_loss(perturbed, deltas, match, eta=3.0)
        invariant_ok &= again.total == report.total and np.array_equal(again.selected_negatives,
                                                                        report.selected_negatives)
    verdict(5, count_ok and invariant_ok,
            f"|selected| = min(3P, N) on {trials} instances: {count_ok}; masking invariance bit-identical: "
            f"{invariant_ok}")


def test_6_suppression():
    greedy_ok = hull_ok = seed_ok = argmax_ok = True
    cases = 0
    for dets, thresh in suite(500, seed=11):
        cases += 1
        boxes = [d.box.as_list() for d in dets]
        scores = [d.score for d in dets]
        seeds = greedy_nms_indices(dets, thresh)
        greedy_ok &= seeds == nms_by_subset_enumeration(boxes, scores, thresh)
        alive = set(range(len(dets)))
        for seed, out in blend_nms_with_seeds(dets, thresh):
            members = [i for i in sorted(alive) if i == seed or iou_exact(boxes[seed], boxes[i]) >= thresh]
            alive -= set(members)
            coords = np.array([boxes[i] for i in members])
            got = np.array(out.box.as_list())
            hull_ok &= bool((got >= coords.min(axis=0)).all() and (got <= coords.max(axis=0)).all())
            seed_ok &= out.score == dets[seed].score
        scaled = [Detection(d.image_id, d.box, d.score * 0.37, d.class_id) for d in dets]
        argmax_ok &= greedy_nms_indices(scaled, thresh) == seeds
        argmax_ok &= [s for s, _ in blend_nms_with_seeds(scaled, thresh)] == seeds
    b1 = Detection("a", BoundingBox(0, 0, 10, 10), 0.6)
    b2 = Detection("a", BoundingBox(0, 0, 20, 20), 0.2)
    # the two boxes overlap at IoU 1/4, so they share a cluster at that threshold
    (blended,) = blend_nms([b1, b2], 0.25)
    oracle = weighted_box_mean([b1.box.as_list(), b2.box.as_list()], [0.6, 0.2])
    example_ok = np.allclose(blended.box.as_list(), oracle, rtol=0, atol=1e-12) and \
        np.allclose(blended.box.as_list(), [0, 0, 12.5, 12.5], rtol=0, atol=1e-12) and blended.score == 0.6
    ok = greedy_ok and hull_ok and seed_ok and argmax_ok and example_ok
    verdict(6, ok, f"{cases} cases: greedy=oracle {greedy_ok}, hull {hull_ok}, seed score {seed_ok}, "
                   f"argmax {argmax_ok}; worked example {blended.box.as_list()} score {blended.score}")


def test_7_evaluation():
    rng = np.random.default_rng(77)
    oracle_ok = True
    for _ in range(2000):
        dets, gts = random_instance(rng, max_dets=6, max_gts=4)
        d, r = to_objects(dets, gts)
        for interp in ("all", "11"):
            oracle_ok &= math.isclose(average_precision(d, r, interp=interp).ap, oracle_ap(dets, gts, 0.5, interp),
                                      rel_tol=0, abs_tol=1e-12)
    boxes = [(0, 0, 10, 10), (20, 20, 40, 30), (5, 5, 9, 9)]
    perfect_dets, perfect_gts = to_objects([("a", b, s) for b, s in zip(boxes, (0.2, 0.9, 0.5))],
                                           {"a": [(b, False) for b in boxes]})
    perfect = average_precision(perfect_dets, perfect_gts).ap
    mono_ok = True
    for _ in range(1000):
        dets, gts = random_instance(rng)
        d, r = to_objects(dets, gts)
        base = average_precision(d, r).ap
        low = min([x.score for x in d], default=1.0) / 2
        mono_ok &= average_precision(d + [Detection("a", BoundingBox(48, 48, 60, 60), low)], r).ap <= base
        gts2 = dict(gts, c=[((40.0, 40.0, 50.0, 50.0), False)])
        d2, r2 = to_objects(dets, gts2)
        base2 = average_precision(d2, r2).ap
        mono_ok &= average_precision([Detection("c", BoundingBox(40, 40, 50, 50), 1.0)] + d2, r2).ap >= base2
    ok = oracle_ok and perfect == 1.0 and mono_ok
    verdict(7, ok, f"oracle agreement on 2000 small instances x 2 interps: {oracle_ok}; perfect AP {perfect}; "
                   f"monotonicity over 1000 trials: {mono_ok}")


def test_8_pipeline_closure(tmp_path):
    rng = np.random.default_rng(88)
    records = [random_record(rng, f"img{i:03d}", "pseudo" if i % 3 == 0 else "human") for i in range(200)]
    serialize_voc(records, tmp_path / "voc")
    round_trip = parse_voc(tmp_path / "voc") == records

    first, second = tmp_path / "run1", tmp_path / "run2"
    first.mkdir()
    second.mkdir()
    a, b = run_pipeline(first), run_pipeline(second)
    identical = a == b and tree_bytes(first) == tree_bytes(second)
    codes_ok = all(code == 0 for code, _, _ in a.values())

    gts = read_voc_oracle(first / "split" / "val")
    with open(VAL_DETS) as fh:
        dets = [(d["image_id"], tuple(d["bbox"]), d["score"]) for d in map(json.loads, fh) if d["image_id"] in gts]
    outcomes, npos = match_for_ap(dets, gts, 0.5)
    expected = float(ap_by_prefix_enumeration(outcomes, npos, "all"))
    reported = float(a["eval_csv"][1].splitlines()[1].split(",")[1])
    ap_ok = abs(reported - expected) <= 1e-9
    ok = round_trip and identical and codes_ok and ap_ok
    verdict(8, ok, f"VOC round-trip on 200 fuzzed records: {round_trip}; CLI split->pseudo->merge->eval AP "
                   f"{reported:.9f} vs oracle {expected:.9f}; reruns byte-identical: {identical}")


def test_9_determinism():
    graph = build_tigernet(default_config(input_size=(64, 64)))
    w1, w2 = init_weights(graph, seed=9), init_weights(graph, seed=9)
    weights_ok = all(np.array_equal(w1[k][p], w2[k][p]) for k in w1 for p in w1[k])
    recs = [random_record(np.random.default_rng(i), f"r{i}") for i in range(12)]
    split_ok = split_dataset(recs, 0.8, 4) == split_dataset(recs, 0.8, 4)
    cut_ok = place_cutout(recs[0], BoundingBox(0, 0, 1, 1), 5) == place_cutout(recs[0], BoundingBox(0, 0, 1, 1), 5)
    inst = [random_loss_instance(np.random.default_rng(3)) for _ in range(2)]
    loss_ok = all(np.array_equal(x, y) for x, y in zip(inst[0][:2], inst[1][:2])) and \
        np.array_equal(inst[0][2].labels, inst[1][2].labels)
    dets = [Detection("a", BoundingBox(0, 0, 10, 10), 0.5), Detection("a", BoundingBox(0, 0, 10, 10), 0.5)]
    ties = greedy_nms_indices(dets) == [0]
    m = MatchResult(np.array([0, NEGATIVE, NEGATIVE, NEGATIVE, NEGATIVE]), np.zeros((5, 4)), np.zeros(5))
    ties &= list(select_hard_negatives(np.ones(5), m, 3)) == [1, 2, 3]
    anchors = np.array([[0, 0, 10, 10], [0, 0, 10, 10]], dtype=float)
    ties &= list(match_anchors(anchors, np.array([[0, 0, 10, 10.0]])).labels) == [0, 0]
    pseudo = [predictions_to_labels(dets, {"a": (20, 20)}) for _ in range(2)]
    ties &= pseudo[0] == pseudo[1]
    ok = weights_ok and split_ok and cut_ok and loss_ok and ties
    verdict(9, ok, f"seeded weights {weights_ok}, split {split_ok}, cutout {cut_ok}, loss instances {loss_ok}; "
                   f"index tie-breaks {ties}")


if __name__ == "__main__":
    import sys
    import tempfile
    from pathlib import Path

    failed = 0
    for name, fn in sorted((n, f) for n, f in globals().items() if n.startswith("test_")):
        try:
            if "tmp_path" in fn.__code__.co_varnames[:fn.__code__.co_argcount]:
                with tempfile.TemporaryDirectory() as tmp:
                    fn(Path(tmp))
            else:
                fn()
        except AssertionError:
            failed += 1
    for number in sorted(RESULTS):
        print(RESULTS[number])
    sys.exit(1 if failed else 0)

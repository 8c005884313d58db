"""``tigernet`` command line: one binary, one subcommand per pipeline step.

Exit codes: 0 success, 1 domain error (message names the offending input),
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import FORMAT_SCHEMA_VERSION, __version__
from .anchors import IGNORE, anchors_for_graph, anchors_to_csv, concat_anchors, match_anchors
from .architecture import build_tigernet, load_arch_config
from .augment_geom import place_cutout
from .data_io import VocError, dataset_stats, list_ids, parse_voc, read_image_sizes, serialize_voc, split_dataset
from .evaluation import PPF_VARIANTS, average_precision, ppf
from .losses import gradient_check, random_loss_instance
from .model_graph import GraphError, count_cost, downsampling_factors, sweep_input_size
from .postprocess import read_detections, suppress, write_detections
from .pseudo_label import distill_report, merge_datasets, predictions_to_labels

DEFAULT_SWEEP = (128, 160, 192, 224, 256, 288, 320)
PAPER_GFLOPS = 0.071


def _emit(args, table: str, csv_text: str | None = None, payload=None) -> None:
    if args.format == "json" and payload is not None:
        sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    elif args.format == "csv" and csv_text is not None:
        sys.stdout.write(csv_text)
    else:
        sys.stdout.write(table if table.endswith("\n") else table + "\n")


def _config(args):
    config = load_arch_config(args.config)
    if getattr(args, "input", None):
        config = config.replace(input_size=(args.input, args.input))
    return config


def cmd_arch(args) -> int:
    config = _config(args)
    include_bn = not args.no_bn
    if args.sweep:
        sizes = args.sizes or DEFAULT_SWEEP
        result = sweep_input_size(lambda s: build_tigernet(config.replace(input_size=(s, s))),
                                  args.target_gflops * 1e9, sizes, args.mac_flops, include_bn)
        rows = "\n".join(f"{s:>6} {f / 1e9:>10.6f} {p:>10,}" for s, f, p in result.rows)
        table = (f"{'size':>6} {'GFLOPs':>10} {'params':>10}\n{rows}\n"
                 f"best size for {args.target_gflops} GFLOPs (1 MAC = {args.mac_flops} FLOPs): {result.best_size}")
        payload = {"rows": [{"size": s, "flops": f, "params": p} for s, f, p in result.rows],
                   "best_size": result.best_size, "target_flops": result.target_flops,
                   "mac_flops": result.mac_flops}
        _emit(args, table, result.to_csv(), payload)
        return 0
    graph = build_tigernet(config)
    report = count_cost(graph, args.mac_flops, include_bn)
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    factors = downsampling_factors(graph)
    table = (report.to_table() + f"\nparams {report.total_params:,}  GFLOPs {report.gflops:.6f}  "
             f"head strides {tuple(int(f) for f in factors)}")
    payload = {
        "total_params": report.total_params, "total_flops": report.total_flops,
        "convention": report.convention, "input_resolution": list(report.input_resolution),
        "head_strides": [int(f) for f in factors],
        "per_node": [{"node_id": n.node_id, "kind": n.kind, "params": n.params, "flops": n.flops,
                      "output_shape": list(n.output_shape)} for n in report.per_node],
    }
    _emit(args, table, report.to_csv(), payload)
    return 0


def cmd_anchors(args) -> int:
    config = _config(args)
    grids = anchors_for_graph(build_tigernet(config), config)
    text = anchors_to_csv(grids)
    if args.out:
        Path(args.out).write_text(text)
    summary = [(g.level, g.stride, g.shape[0], g.shape[1], len(g.anchors)) for g in grids]
    table = "level stride  H  W  anchors\n" + "\n".join(
        f"{l:>5} {s:>6} {h:>2} {w:>2} {n:>8}" for l, s, h, w, n in summary
    ) + f"\ntotal {sum(r[4] for r in summary)}"
    payload = {"levels": [dict(zip(("level", "stride", "h", "w", "anchors"), r)) for r in summary],
               "total": sum(r[4] for r in summary)}
    _emit(args, table, text if not args.out else None, payload)
    return 0


def cmd_match(args) -> int:
    config = _config(args)
    anchors = concat_anchors(anchors_for_graph(build_tigernet(config), config))
    in_h, in_w = config.input_size
    rows = []
    for record in parse_voc(args.gt):
        gts = record.boxes * np.array([in_w / record.width, in_h / record.height] * 2)
        m = match_anchors(anchors, gts, args.pos_iou, args.neg_iou)
        covered = set(m.labels[m.labels >= 0].tolist())
        rows.append((record.image_id, len(gts), m.num_positive, m.num_negative,
                     int((m.labels == IGNORE).sum()), len(gts) - len(covered)))
    header = ("image_id", "gts", "positive", "negative", "ignore", "unmatched_gts")
    csv_text = ",".join(header) + "\n" + "".join(",".join(map(str, r)) + "\n" for r in rows)
    table = "\n".join(" ".join(f"{v!s:>12}" for v in r) for r in [header, *rows])
    _emit(args, table, csv_text, [dict(zip(header, r)) for r in rows])
    return 0


def cmd_loss_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    errors = []
    for _ in range(args.trials):
        logits, deltas, match = random_loss_instance(rng, args.anchors)
        errors.append(gradient_check(logits, deltas, match, eta=args.eta, box_weight=args.box_weight))
    worst = max(errors) if errors else 0.0
    ok = worst < args.tol
    table = (f"trials {args.trials}  max relative gradient error {worst:.3e}  tolerance {args.tol:g}  "
             f"{'PASS' if ok else 'FAIL'}")
    csv_text = "trial,max_rel_error\n" + "".join(f"{i},{e!r}\n" for i, e in enumerate(errors))
    _emit(args, table, csv_text, {"trials": args.trials, "max_rel_error": worst, "tol": args.tol, "pass": ok})
    return 0 if ok else 1


def cmd_nms(args) -> int:
    dets = [d for d in read_detections(args.dets) if d.score >= args.score_thresh]
    kept = suppress(dets, args.mode, args.iou)
    if args.out:
        write_detections(kept, args.out)
        _emit(args, f"{len(dets)} detections in, {len(kept)} kept ({args.mode})", None,
              {"in": len(dets), "kept": len(kept), "mode": args.mode})
    else:
        write_detections(kept, sys.stdout)
    return 0


def cmd_eval(args) -> int:
    gts = parse_voc(args.gt)
    image_set = {r.image_id for r in gts}
    all_dets = read_detections(args.dets)
    # the gt directory is the evaluated image set
    dets = [d for d in all_dets if d.image_id in image_set]
    skipped = len(all_dets) - len(dets)
    curve = average_precision(dets, gts, args.iou, args.interp, args.class_name)
    if args.pr_csv:
        Path(args.pr_csv).write_text(curve.to_csv())
    lines = [f"AP {curve.ap:.6f}  (interp={curve.interp}, iou={curve.iou_thresh:g}, gts={curve.num_gt}, "
             f"tp={curve.num_tp}, fp={curve.num_fp}, skipped_dets={skipped})"]
    lines.append(f"{'rank':>5} {'score':>8} {'recall':>8} {'precision':>9}")
    for i, (s, r, p) in enumerate(zip(curve.scores, curve.recall, curve.precision), 1):
        lines.append(f"{i:>5} {s:>8.4f} {r:>8.4f} {p:>9.4f}")
    payload = {"ap": curve.ap, "interp": curve.interp, "iou": curve.iou_thresh, "num_gt": curve.num_gt,
               "tp": curve.num_tp, "fp": curve.num_fp, "skipped_dets": skipped}
    if args.gflops:
        for name in sorted(PPF_VARIANTS):
            value = ppf(curve.ap, args.gflops, name)
            lines.append(str(value))
            payload[f"ppf_{name}"] = value.value
    _emit(args, "\n".join(lines), f"metric,value\nap,{curve.ap!r}\n", payload)
    return 0


def cmd_pseudo(args) -> int:
    dets = read_detections(args.dets)
    sizes = read_image_sizes(args.sizes)
    records = predictions_to_labels(dets, sizes, args.thresh, args.nms, args.iou, tuple(args.class_names),
                                    keep_empty=not args.drop_empty)
    serialize_voc(records, args.out)
    boxes = sum(len(r.annotations) for r in records)
    _emit(args, f"{len(records)} pseudo-labelled images, {boxes} boxes -> {args.out}",
          f"images,boxes\n{len(records)},{boxes}\n", {"images": len(records), "boxes": boxes})
    return 0


def cmd_merge(args) -> int:
    merged = merge_datasets(parse_voc(args.labeled), parse_voc(args.pseudo), args.policy)
    serialize_voc(merged, args.out)
    report = distill_report(merged)
    payload = {"images": report.images, "boxes": report.boxes,
               "mean_boxes_per_image": report.mean_boxes_per_image,
               "score_histogram": list(report.score_histogram)}
    _emit(args, report.to_text(), report.to_text(), payload)
    return 0


def cmd_split(args) -> int:
    records = parse_voc(args.gt)
    train, val = split_dataset(records, args.fraction, args.seed)
    out = Path(args.out)
    serialize_voc(train, out / "train")
    serialize_voc(val, out / "val")
    (out / "train.txt").write_text(list_ids(train))
    (out / "val.txt").write_text(list_ids(val))
    _emit(args, f"train {len(train)}  val {len(val)}  (seed {args.seed})",
          f"split,images\ntrain,{len(train)}\nval,{len(val)}\n", {"train": len(train), "val": len(val)})
    return 0


def cmd_augment_plan(args) -> int:
    records = parse_voc(args.gt)
    donors = [(r.image_id, a.box) for r in records for a in r.annotations]
    if not donors:
        raise ValueError(f"{args.gt}: no annotated boxes to use as cutout donors")
    rng = np.random.default_rng(args.seed)
    placements, skipped = [], []
    for record in records:
        src_id, box = donors[int(rng.integers(len(donors)))]
        seed = int(rng.integers(2 ** 32))
        if box.width > record.width or box.height > record.height:
            skipped.append(record.image_id)
            continue
        result = place_cutout(record, box, seed, args.max_iou, args.attempts, src_id)
        if result.placed:
            placements.append(result.placement)
        else:
            skipped.append(record.image_id)
    lines = "".join(p.to_json() + "\n" for p in placements)
    if args.out:
        Path(args.out).write_text(lines)
    table = f"{len(placements)} placements, {len(skipped)} without placement"
    if skipped:
        table += ": " + " ".join(skipped)
    _emit(args, table if args.out else lines + table, lines,
          {"placed": len(placements), "no_placement": skipped})
    return 0


def cmd_stats(args) -> int:
    warnings = Counter()
    stats = dataset_stats(parse_voc(args.gt, warnings))
    lines = [f"images {stats.num_images}", f"boxes {stats.num_boxes}", f"clamped boxes {warnings['clamped']}"]
    lines += [f"resolution {w}x{h}: {c}" for (w, h), c in sorted(stats.resolutions.items())]
    lines += [f"class {n}: {c}" for n, c in sorted(stats.boxes_per_class.items())]
    payload = {"images": stats.num_images, "boxes": stats.num_boxes, "clamped": warnings["clamped"],
               "resolutions": {f"{w}x{h}": c for (w, h), c in sorted(stats.resolutions.items())},
               "classes": dict(sorted(stats.boxes_per_class.items()))}
    _emit(args, "\n".join(lines), stats.to_csv(), payload)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("table", "csv", "json"), default="table",
                        help="output format (default: table)")
    common.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")

    parser = argparse.ArgumentParser(prog="tigernet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version",
                        version=f"tigernet {__version__} (format schema {FORMAT_SCHEMA_VERSION})")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=fn)
        return p

    def arch_opts(p):
        p.add_argument("--config", help="architecture profile (default: packaged TigerNet profile)")
        p.add_argument("--input", type=int, help="square input size in pixels (default: profile value, 256)")

    p = add("arch", cmd_arch, "build the graph and print its parameter/FLOPs report")
    arch_opts(p)
    p.add_argument("--mac-flops", type=int, choices=(1, 2), default=2, help="FLOPs per multiply-accumulate (default: 2)")
    p.add_argument("--no-bn", action="store_true", help="exclude batch-norm affine parameters")
    p.add_argument("--csv", help="also write the per-node CSV here")
    p.add_argument("--sweep", action="store_true", help="cost the model over a range of input sizes")
    p.add_argument("--sizes", type=int, nargs="+", help="sweep sizes (default: 128..320 step 32)")
    p.add_argument("--target-gflops", type=float, default=PAPER_GFLOPS, help="sweep target (default: 0.071)")

    p = add("anchors", cmd_anchors, "generate the anchor grids for the pyramid levels")
    arch_opts(p)
    p.add_argument("--out", help="write the anchor CSV here (default: stdout)")

    p = add("match", cmd_match, "assign anchors to VOC ground truth and report per-image counts")
    arch_opts(p)
    p.add_argument("--gt", required=True, help="directory of VOC XML files")
    p.add_argument("--pos-iou", type=float, default=0.5, help="positive IoU threshold (default: 0.5)")
    p.add_argument("--neg-iou", type=float, default=0.4, help="negative IoU threshold (default: 0.4)")

    p = add("loss-check", cmd_loss_check, "verify loss gradients against central differences")
    p.add_argument("--trials", type=int, default=50, help="random instances (default: 50)")
    p.add_argument("--anchors", type=int, default=24, help="anchors per instance (default: 24)")
    p.add_argument("--eta", type=float, default=3.0, help="hard negatives per positive (default: 3)")
    p.add_argument("--box-weight", type=float, default=1.0, help="box loss weight (default: 1.0)")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error (default: 1e-4)")

    p = add("nms", cmd_nms, "suppress overlapping detections per image and class")
    p.add_argument("--dets", required=True, help="detections JSONL")
    p.add_argument("--mode", choices=("greedy", "blend"), default="blend", help="suppressor (default: blend)")
    p.add_argument("--iou", type=float, default=0.5, help="overlap threshold (default: 0.5)")
    p.add_argument("--score-thresh", type=float, default=0.05, help="drop scores below this first (default: 0.05)")
    p.add_argument("--out", help="output JSONL (default: stdout)")

    p = add("eval", cmd_eval, "average precision of detections against VOC ground truth "
                              "(detections on images outside --gt are skipped)")
    p.add_argument("--gt", required=True, help="directory of VOC XML files")
    p.add_argument("--dets", required=True, help="detections JSONL")
    p.add_argument("--iou", type=float, default=0.5, help="match threshold (default: 0.5)")
    p.add_argument("--interp", choices=("all", "11"), default="all", help="AP interpolation (default: all)")
    p.add_argument("--class", dest="class_name", help="only score ground truth of this class (default: all)")
    p.add_argument("--pr-csv", help="write the precision/recall curve here")
    p.add_argument("--gflops", type=float, help="also print named PPF variants for this compute cost")

    p = add("pseudo", cmd_pseudo, "turn teacher detections into pseudo-labelled VOC files")
    p.add_argument("--dets", required=True, help="teacher detections JSONL")
    p.add_argument("--sizes", required=True, help="CSV image_id,width,height")
    p.add_argument("--thresh", type=float, default=0.5, help="score threshold; 0 keeps raw output (default: 0.5)")
    p.add_argument("--nms", choices=("blend", "greedy", "none"), default="blend", help="suppressor (default: blend)")
    p.add_argument("--iou", type=float, default=0.5, help="suppression overlap threshold (default: 0.5)")
    p.add_argument("--class-names", nargs="+", default=["tiger"], help="names for class ids (default: tiger)")
    p.add_argument("--drop-empty", action="store_true", help="skip images with no surviving boxes")
    p.add_argument("--out", required=True, help="output VOC directory")

    p = add("merge", cmd_merge, "merge labelled and pseudo-labelled VOC sets")
    p.add_argument("--labeled", required=True, help="labelled VOC directory")
    p.add_argument("--pseudo", required=True, help="pseudo-labelled VOC directory")
    p.add_argument("--out", required=True, help="output VOC directory")
    p.add_argument("--policy", choices=("prefer_labeled", "error"), default="prefer_labeled",
                   help="image_id collision policy (default: prefer_labeled)")

    p = add("split", cmd_split, "random image-level train/val split")
    p.add_argument("--gt", required=True, help="directory of VOC XML files")
    p.add_argument("--fraction", type=float, default=0.8, help="train fraction (default: 0.8)")
    p.add_argument("--out", required=True, help="output directory (train/, val/, train.txt, val.txt)")

    p = add("augment-plan", cmd_augment_plan, "plan tiger cutout pastes (geometry only)")
    p.add_argument("--gt", required=True, help="directory of VOC XML files")
    p.add_argument("--max-iou", type=float, default=0.3, help="max IoU with existing boxes (default: 0.3)")
    p.add_argument("--attempts", type=int, default=100, help="rejection-sampling budget (default: 100)")
    p.add_argument("--out", help="placement JSONL (default: stdout)")

    p = add("stats", cmd_stats, "image/box counts and resolution histogram")
    p.add_argument("--gt", required=True, help="directory of VOC XML files")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (VocError, GraphError, ValueError, OSError, KeyError) as exc:
        print(f"tigernet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line tests on the shipped fixtures.

Golden stdout lives in ``fixtures/golden/<name>.txt``.  After an intended
output change, regenerate with ``TIGERNET_REGEN_GOLDEN=1 pytest tests/test_cli.py``.
"""

import io
import json
import os
from contextlib import redirect_stderr, redirect_stdout
import xml.etree.ElementTree as ET
from pathlib import Path

import pytest

from tigernet import FORMAT_SCHEMA_VERSION, __version__
from tigernet.cli import main

from oracles import ap_by_prefix_enumeration, match_for_ap

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = FIXTURES / "golden"
VOC = str(FIXTURES / "voc")
TEACHER = str(FIXTURES / "teacher.jsonl")
SIZES = str(FIXTURES / "sizes.csv")
VAL_DETS = str(FIXTURES / "val_dets.jsonl")

# run in order inside one working directory; later steps read earlier outputs
PIPELINE = [
    ("arch", ["arch", "--input", "256"]),
    ("arch_sweep", ["arch", "--sweep"]),
    ("arch_sweep_mac1", ["arch", "--sweep", "--mac-flops", "1", "--format", "csv"]),
    ("arch_json", ["arch", "--input", "128", "--format", "json"]),
    ("anchors", ["anchors", "--input", "128"]),
    ("anchors_csv", ["anchors", "--input", "64", "--format", "csv"]),
    ("match", ["match", "--gt", VOC]),
    ("loss_check", ["loss-check", "--trials", "5", "--seed", "7"]),
    ("nms_greedy", ["nms", "--dets", TEACHER, "--mode", "greedy"]),
    ("nms_blend", ["nms", "--dets", TEACHER, "--mode", "blend", "--out", "nms.jsonl"]),
    ("stats", ["stats", "--gt", VOC]),
    ("stats_json", ["stats", "--gt", VOC, "--format", "json"]),
    ("split", ["split", "--gt", VOC, "--out", "split", "--fraction", "0.6", "--seed", "1"]),
    ("pseudo", ["pseudo", "--dets", TEACHER, "--sizes", SIZES, "--out", "pseudo"]),
    ("merge", ["merge", "--labeled", "split/train", "--pseudo", "pseudo", "--out", "merged"]),
    ("eval", ["eval", "--gt", "split/val", "--dets", VAL_DETS, "--pr-csv", "pr.csv", "--gflops", "0.0667"]),
    ("eval_csv", ["eval", "--gt", "split/val", "--dets", VAL_DETS, "--format", "csv"]),
    ("eval_11", ["eval", "--gt", "split/val", "--dets", VAL_DETS, "--interp", "11", "--format", "json"]),
    ("augment_plan", ["augment-plan", "--gt", VOC, "--seed", "3"]),
]


def run(argv):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main(argv)
    return code, out.getvalue(), err.getvalue()


def run_pipeline(workdir):
    cwd = os.getcwd()
    os.chdir(workdir)
    try:
        return {name: run(argv) for name, argv in PIPELINE}
    finally:
        os.chdir(cwd)


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    first, second = tmp_path_factory.mktemp("run1"), tmp_path_factory.mktemp("run2")
    return first, run_pipeline(first), second, run_pipeline(second)


@pytest.mark.parametrize("name", [n for n, _ in PIPELINE])
def test_golden_output(pipeline, name):
    _, outputs, _, _ = pipeline
    code, out, err = outputs[name]
    assert code == 0, err
    path = GOLDEN / f"{name}.txt"
    if os.environ.get("TIGERNET_REGEN_GOLDEN"):
        GOLDEN.mkdir(exist_ok=True)
        path.write_text(out)
    assert out == path.read_text()


def test_reruns_are_byte_identical(pipeline):
    first, a, second, b = pipeline
    assert a == b
    assert tree_bytes(first) == tree_bytes(second)


def test_split_files(pipeline):
    first, _, _, _ = pipeline
    train = (first / "split" / "train.txt").read_text().split()
    val = (first / "split" / "val.txt").read_text().split()
    assert len(train) == 6 and len(val) == 4
    assert sorted(train + val) == [f"t{i:02d}" for i in range(10)]
    assert sorted(p.stem for p in (first / "split" / "val").glob("*.xml")) == sorted(val)


def test_merged_provenance(pipeline):
    first, _, _, _ = pipeline
    tags = {p.stem: ET.parse(p).getroot().findtext("source/annotation") for p in (first / "merged").glob("*.xml")}
    assert len(tags) == 10
    assert {k for k, v in tags.items() if v == "pseudo"} == {"u00", "u01", "u02", "u03"}


def read_voc_oracle(directory):
    """Independent VOC reading: stdlib XML, 1-based inclusive to 0-based continuous."""
    gts = {}
    for path in sorted(Path(directory).glob("*.xml")):
        root = ET.parse(path).getroot()
        entries = []
        for obj in root.findall("object"):
            b = obj.find("bndbox")
            box = (float(b.findtext("xmin")) - 1, float(b.findtext("ymin")) - 1,
                   float(b.findtext("xmax")), float(b.findtext("ymax")))
            entries.append((box, obj.findtext("difficult") == "1"))
        gts[path.stem] = entries
    return gts


def test_end_to_end_ap_matches_oracle(pipeline):
    first, outputs, _, _ = pipeline
    gts = read_voc_oracle(first / "split" / "val")
    dets = []
    with open(VAL_DETS) as fh:
        for line in fh:
            d = json.loads(line)
            if d["image_id"] in gts:
                dets.append((d["image_id"], tuple(d["bbox"]), d["score"]))
    outcomes, npos = match_for_ap(dets, gts, 0.5)
    expected = float(ap_by_prefix_enumeration(outcomes, npos, "all"))
    assert 0.0 < expected < 1.0
    reported = json.loads(outputs["eval_11"][1])
    assert reported["interp"] == "11"
    assert reported["ap"] == pytest.approx(float(ap_by_prefix_enumeration(outcomes, npos, "11")), abs=1e-9)
    assert outputs["eval"][1].startswith(f"AP {expected:.6f}")
    pr_rows = (first / "pr.csv").read_text().splitlines()
    # detections on difficult boxes are left out of the curve
    assert pr_rows[0] == "rank,score,recall,precision"
    assert len(pr_rows) - 1 == sum(o != "ignore" for o in outcomes)


def test_end_to_end_csv_value(tmp_path):
    workdir = tmp_path
    assert run(["split", "--gt", VOC, "--out", str(workdir / "s"), "--fraction", "0.6", "--seed", "1"])[0] == 0
    assert run(["pseudo", "--dets", TEACHER, "--sizes", SIZES, "--out", str(workdir / "p")])[0] == 0
    assert run(["merge", "--labeled", str(workdir / "s" / "train"), "--pseudo", str(workdir / "p"),
                "--out", str(workdir / "m")])[0] == 0
    code, out, _ = run(["eval", "--gt", str(workdir / "s" / "val"), "--dets", VAL_DETS, "--format", "csv"])
    assert code == 0
    ap = float(out.splitlines()[1].split(",")[1])
    gts = read_voc_oracle(workdir / "s" / "val")
    dets = [(d["image_id"], tuple(d["bbox"]), d["score"]) for d in map(json.loads, open(VAL_DETS))
            if d["image_id"] in gts]
    outcomes, npos = match_for_ap(dets, gts, 0.5)
    assert ap == pytest.approx(float(ap_by_prefix_enumeration(outcomes, npos, "all")), abs=1e-9)


class TestErrors:
    def test_eval_missing_gt_is_usage_error(self, capsys):
        assert main(["eval", "--dets", VAL_DETS]) == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert main(["train"]) == 2

    def test_unknown_flag(self, capsys):
        assert main(["stats", "--gt", VOC, "--verbose"]) == 2

    def test_missing_directory_names_input(self, tmp_path, capsys):
        missing = tmp_path / "nowhere"
        assert main(["stats", "--gt", str(missing)]) == 1
        assert str(missing) in capsys.readouterr().err

    def test_bad_detection_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"image_id": "a", "bbox": [0, 0, 1, 1], "score": 3}\n')
        assert main(["nms", "--dets", str(bad)]) == 1
        assert "line 1" in capsys.readouterr().err

    def test_unknown_pseudo_image(self, tmp_path, capsys):
        sizes = tmp_path / "sizes.csv"
        sizes.write_text("image_id,width,height\nzz,10,10\n")
        assert main(["pseudo", "--dets", TEACHER, "--sizes", str(sizes), "--out", str(tmp_path / "o")]) == 1
        assert "unknown images" in capsys.readouterr().err

    def test_merge_collision_policy(self, tmp_path, capsys):
        assert main(["merge", "--labeled", VOC, "--pseudo", VOC, "--out", str(tmp_path / "m"),
                     "--policy", "error"]) == 1

    def test_bad_profile(self, tmp_path, capsys):
        cfg = tmp_path / "x.arch"
        cfg.write_text("fpn_channels = 0\n[backbone]\nconv 8 2\n")
        assert main(["arch", "--config", str(cfg)]) == 1

    def test_version(self, capsys):
        assert main(["--version"]) == 0
        out = capsys.readouterr().out
        assert __version__ in out and f"format schema {FORMAT_SCHEMA_VERSION}" in out

    def test_help_lists_every_subcommand(self, capsys):
        assert main(["--help"]) == 0
        out = capsys.readouterr().out
        for name in ("arch", "anchors", "match", "loss-check", "nms", "eval", "pseudo", "merge", "split",
                     "augment-plan", "stats"):
            assert name in out

import csv
import json
import re
import subprocess
import sys

import numpy as np
import pytest

from crepa.cli import main
from crepa.containers import read_video
from crepa.plots import box_stats, svg_boxplot

SMALL = [
    "data.size=16", "data.frames=8", "data.n_per_class=2",
    "dit.depth=2", "dit.dim=32", "dit.heads=2", "dit.tap_layer=2",
    "encoder.steps=250",
    "pretrain.steps=40",
    "training.steps=12", "training.batch_size=2", "training.eval_every=12",
    "training.classes=[0]",
    "sample.n=2",
]


def _run(args, capsys):
    code = main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


def _sets(extra=()):
    flags = []
    for item in (*SMALL, *extra):
        flags.extend(["--set", item])
    return flags


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data + encoder + base shared by the verb tests."""
    root = tmp_path_factory.mktemp("cli")
    flags = _sets()
    assert main(["gen-data", "--out", str(root / "data"), *flags]) == 0
    assert main(["pretrain-encoder", "--data", str(root / "data"),
                 "--out", str(root / "enc"), *flags]) == 0
    assert main(["pretrain-base", "--data", str(root / "data"),
                 "--out", str(root / "base"), *flags]) == 0
    return root


def test_gen_data_defaults_produce_72_entries(tmp_path, capsys):
    code, out, _ = _run(["gen-data", "--out", str(tmp_path / "d"),
                         "--set", "data.size=16", "--set", "data.frames=2"], capsys)
    assert code == 0
    assert "72 videos" in out
    lines = (tmp_path / "d" / "manifest.jsonl").read_text().strip().splitlines()
    assert len(lines) == 72


def test_pipeline_artifacts_exist(pipeline):
    assert (pipeline / "data" / "manifest.jsonl").exists()
    assert (pipeline / "enc" / "encoder.crpe").exists()
    assert (pipeline / "base" / "base.crpd").exists()


def test_finetune_compare_report(pipeline, tmp_path, capsys):
    flags = _sets()
    for mode in ("vanilla", "repa", "crepa"):
        code, out, err = _run([
            "finetune", "--data", str(pipeline / "data"), "--base", str(pipeline / "base" / "base.crpd"),
            "--encoder", str(pipeline / "enc" / "encoder.crpe"), "--mode", mode,
            "--out", str(tmp_path / f"run-{mode}"), *flags,
        ], capsys)
        assert code == 0, err
        assert f"finetune[{mode}]" in out
        assert (tmp_path / f"run-{mode}" / "curves.csv").exists()

    code, out, err = _run([
        "compare", "--runs",
        f"vanilla={tmp_path / 'run-vanilla'}",
        f"repa={tmp_path / 'run-repa'}",
        f"crepa={tmp_path / 'run-crepa'}",
        "--encoder", str(pipeline / "enc" / "encoder.crpe"),
        "--out", str(tmp_path / "cmp"), *flags,
    ], capsys)
    assert code == 0, err
    with open(tmp_path / "cmp" / "compare.json") as fh:
        doc = json.load(fh)
    assert len(doc["rows"]) == 3
    vanilla = [r for r in doc["rows"] if r["mode"] == "vanilla"][0]
    assert vanilla["final_align"] is None
    with open(tmp_path / "cmp" / "compare.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["mode"] for r in rows] == ["crepa", "repa", "vanilla"]
    assert rows[2]["final_align"] == ""

    code, out, err = _run([
        "report", "--compare", str(tmp_path / "cmp" / "compare.json"),
        "--out", str(tmp_path / "rep"), *flags,
    ], capsys)
    assert code == 0, err
    svgs = sorted((tmp_path / "rep").glob("offset*.svg"))
    assert len(svgs) == 3
    assert (tmp_path / "rep" / "report.csv").exists()

    # SVG box values match quantiles recomputed from the report CSV
    with open(tmp_path / "rep" / "report.csv") as fh:
        data = {}
        for row in csv.DictReader(fh):
            data.setdefault((row["regime"], int(row["offset"])), []).append(float(row["value"]))
    for svg_path in svgs:
        offset = int(svg_path.stem.replace("offset", ""))
        text = svg_path.read_text()
        for match in re.finditer(r'data-group="(\w+)" data-q1="([\d.+-]+)" data-median="([\d.+-]+)" data-q3="([\d.+-]+)"', text):
            name, q1, med, q3 = match.group(1), *map(float, match.group(2, 3, 4))
            vals = data[(name, offset)]
            assert abs(np.percentile(vals, 25) - q1) < 5e-5
            assert abs(np.percentile(vals, 50) - med) < 5e-5
            assert abs(np.percentile(vals, 75) - q3) < 5e-5


def test_compare_mismatched_seeds_exits_1(pipeline, tmp_path, capsys):
    flags = _sets()
    base = ["--data", str(pipeline / "data"), "--base", str(pipeline / "base" / "base.crpd"),
            "--encoder", str(pipeline / "enc" / "encoder.crpe")]
    assert main(["finetune", *base, "--mode", "repa", "--out", str(tmp_path / "a"), *flags]) == 0
    assert main(["finetune", *base, "--mode", "crepa", "--out", str(tmp_path / "b"),
                 *flags, "--set", "run.seed=9"]) == 0
    code, _, err = _run([
        "compare", "--runs", f"repa={tmp_path / 'a'}", f"crepa={tmp_path / 'b'}",
        "--out", str(tmp_path / "cmp"), *flags,
    ], capsys)
    assert code == 1
    assert "comparison-invalid" in err
    assert err.startswith("training:")


def test_sweep_and_probe_and_sample(pipeline, tmp_path, capsys):
    flags = _sets()
    code, out, err = _run([
        "sweep-alignment", "--data", str(pipeline / "data"),
        "--model", str(pipeline / "base" / "base.crpd"),
        "--encoder", str(pipeline / "enc" / "encoder.crpe"),
        "--out", str(tmp_path / "sweep"), *flags,
    ], capsys)
    assert code == 0, err
    assert (tmp_path / "sweep" / "sweep.json").exists()
    with open(tmp_path / "sweep" / "sweep.csv") as fh:
        header = fh.readline().strip().split(",")
    assert header == ["run_id", "video_id", "frame", "offset", "t_idx", "cknna"]

    code, out, err = _run([
        "probe", "--data", str(pipeline / "data"),
        "--model", str(pipeline / "base" / "base.crpd"),
        "--out", str(tmp_path / "probe"), *flags,
    ], capsys)
    assert code == 0, err
    with open(tmp_path / "probe" / "probe.json") as fh:
        doc = json.load(fh)
    assert set(doc["accuracies"]) == {"1", "2"}

    code, out, err = _run([
        "sample", "--model", str(pipeline / "base" / "base.crpd"),
        "--out", str(tmp_path / "samples"), *flags,
    ], capsys)
    assert code == 0, err
    assert (tmp_path / "samples" / "samples.png").exists()
    vid = read_video(tmp_path / "samples" / "sample000.crpv")
    assert vid.shape == (8, 16, 16, 3)
    assert vid.min() >= 0.0 and vid.max() <= 1.0


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code, _, err = _run(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")], capsys)
    assert code == 2
    assert "config" in err.lower()
    code, _, err = _run(["gen-data", "--out", str(tmp_path / "o"), "--set", "data.nope=1"], capsys)
    assert code == 2


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"sizee": 16}}))
    code, _, err = _run(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o")], capsys)
    assert code == 2


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "crepa.cli", "gen-data", "--out", str(tmp_path / "d"),
         "--set", "data.size=16", "--set", "data.frames=2", "--set", "data.n_per_class=1"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "gen-data" in proc.stdout


def test_box_stats_order_statistics_oracle():
    stats = box_stats(np.arange(1, 101, dtype=float))
    assert stats["q1"] == 25.75
    assert stats["median"] == 50.5
    assert stats["q3"] == 75.25
    # whiskers clip to the most extreme points within 1.5 IQR
    vals = np.concatenate([np.arange(1, 101, dtype=float), [500.0]])
    stats = box_stats(vals)
    assert stats["whisker_hi"] <= stats["q3"] + 1.5 * (stats["q3"] - stats["q1"])
    assert stats["whisker_hi"] == 100.0


def test_svg_boxplot_deterministic(tmp_path):
    groups = {"a": [1.0, 2.0, 3.0, 4.0], "b": [2.0, 2.5, 3.5]}
    svg_boxplot(groups, "t", tmp_path / "x.svg")
    svg_boxplot(groups, "t", tmp_path / "y.svg")
    assert (tmp_path / "x.svg").read_bytes() == (tmp_path / "y.svg").read_bytes()


def test_svg_single_regime(tmp_path):
    stats = svg_boxplot({"only": [0.1, 0.2, 0.3]}, "solo", tmp_path / "s.svg")
    assert set(stats) == {"only"}
    text = (tmp_path / "s.svg").read_text()
    assert text.count("<rect") == 1

import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from bitefuse import cli
from bitefuse.annotations import (
    AnnotationSet,
    ImageInfo,
    merge_grades,
    parse_annotation_file,
    write_annotation_file,
)
from bitefuse.bootstrap import _stat_fn, bootstrap_replicates, jackknife_values
from bitefuse.metrics import match_all
from conftest import ann
from oracles import textbook_bca


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_json(path):
    return json.loads(path.read_text())


@pytest.fixture
def sim_dir(tmp_path):
    out = tmp_path / "sim"
    assert run("simulate", "--output-dir", out, "--seed", 7, "--n-images", 40, "--jitter", 4,
               "--miss-rate", 0.1, "--spurious-rate", 0.2, "--label-noise", 0.1) == 0
    return out


@pytest.fixture
def fused(sim_dir, tmp_path):
    out = tmp_path / "consensus.json"
    inputs = sorted(sim_dir.glob("annotator_*.json"))
    assert run("fuse", "--input", *inputs, "--output", out) == 0
    return out


class TestExitCodes:
    def test_missing_file_is_parse_error(self, tmp_path, capsys):
        missing = tmp_path / "nowhere.json"
        assert run("fuse", "--input", missing, "--output", tmp_path / "o.json") == 2
        assert str(missing) in capsys.readouterr().err

    def test_malformed_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("[1, 2")
        assert run("fuse", "--input", bad, "--output", tmp_path / "o.json") == 2

    def test_validation_error(self, tmp_path, capsys):
        doc = {"images": [{"id": "a", "width": 10, "height": 10}],
               "annotations": [{"image_id": "a", "source_id": "s", "label": "enamel_caries", "bbox": [5, 5, 2, 8]}]}
        p = tmp_path / "deg.json"
        p.write_text(json.dumps(doc))
        assert run("fuse", "--input", p, "--output", tmp_path / "o.json") == 3
        assert "degenerate box" in capsys.readouterr().err

    @pytest.mark.parametrize("argv", [
        ["fuse", "--output", "x.json"],
        ["fuse", "--input", "a.json", "--output", "x.json", "--p", "1.5"],
        ["ci", "--pred", "a.json", "--gt", "b.json", "--output", "o.json"],
        ["split", "--output-dir", "d"],
        ["simulate", "--output-dir", "d"],
        ["eval", "--pred", "a.json", "--gt", "b.json", "--output", "o.json", "--iou", "0"],
        ["nonsense"],
    ])
    def test_config_errors(self, argv, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        (tmp_path / "a.json").write_text(json.dumps({"images": [], "annotations": []}))
        assert run(*argv) == 4

    def test_internal_error(self, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise RuntimeError("boom")

        monkeypatch.setattr(cli, "simulate", boom)
        assert run("simulate", "--output-dir", tmp_path, "--seed", 1) == 5

    def test_version(self, capsys):
        assert run("--version") == 0
        assert capsys.readouterr().out.strip() == cli.__version__


class TestFuse:
    def test_single_annotator_passthrough(self, tmp_path, gmm_fixture_set):
        single = gmm_fixture_set.subset(["scan"]).by_source()["annotator_1"]
        src = write_annotation_file(single, tmp_path / "a.json")
        assert run("fuse", "--input", src, "--output", tmp_path / "f.json") == 0
        out = parse_annotation_file(tmp_path / "f.json")
        assert len(out) == 1
        assert np.allclose(out.annotations[0].box.as_tuple(), single.annotations[0].box.as_tuple(), atol=1e-3)

    def test_nms_and_gmm_differ(self, tmp_path, gmm_fixture_set):
        paths = [write_annotation_file(s, tmp_path / f"{name}.json") for name, s in gmm_fixture_set.by_source().items()]
        for strategy in ("gmm", "nms"):
            assert run("fuse", "--input", *paths, "--output", tmp_path / f"{strategy}.json", "--strategy", strategy) == 0
        g = parse_annotation_file(tmp_path / "gmm.json")
        n = parse_annotation_file(tmp_path / "nms.json")
        assert len(g) == len(n) == 1
        assert g.annotations[0].box != n.annotations[0].box

    def test_raw_input_merged_and_filtered(self, tmp_path, six_annotator_set):
        src = write_annotation_file(six_annotator_set, tmp_path / "raw.json")
        excl = tmp_path / "exclude.txt"
        excl.write_text("im2\nghost\n")
        out = tmp_path / "f.csv"
        diag = tmp_path / "diag.json"
        assert run("fuse", "--input", src, "--output", out, "--exclude", excl, "--diagnostics", diag) == 0
        fused = parse_annotation_file(out)
        assert fused.label_space == "merged"
        assert fused.image_ids == ["im0", "im1"]
        assert len(fused) == 4
        d = read_json(diag)
        assert d["n_groups"] == 4 and d["filter"]["excluded"] == 1
        assert all(len(g["members"]) == 6 for groups in d["images"].values() for g in groups)

    def test_manifest(self, tmp_path, gmm_fixture_set):
        src = write_annotation_file(gmm_fixture_set, tmp_path / "in.json")
        out = tmp_path / "f.json"
        assert run("fuse", "--input", src, "--output", out) == 0
        m = read_json(tmp_path / "f.json.manifest.json")
        assert m["subcommand"] == "fuse"
        assert m["inputs"][str(src)] == hashlib.sha256(src.read_bytes()).hexdigest()
        assert m["config"]["p"] == 0.9545 and m["tool_version"] == cli.__version__
        assert m["runtime_seconds"] >= 0

    def test_jobs_identical(self, sim_dir, tmp_path):
        inputs = sorted(sim_dir.glob("annotator_*.json"))
        run("fuse", "--input", *inputs, "--output", tmp_path / "j1.json")
        run("fuse", "--input", *inputs, "--output", tmp_path / "j3.json", "--jobs", 3)
        assert (tmp_path / "j1.json").read_bytes() == (tmp_path / "j3.json").read_bytes()


class TestEval:
    def test_identity(self, sim_dir, tmp_path):
        gt = sim_dir / "gt.json"
        out = tmp_path / "ev.json"
        assert run("eval", "--pred", gt, "--gt", gt, "--output", out) == 0
        rep = read_json(out)["reports"][0]
        assert rep["macro"] == {"map": 1.0, "mf1": 1.0, "mfnr": 0.0}
        assert rep["config"]["iou_threshold"] == 0.3

    def test_per_source_rows(self, sim_dir, fused, tmp_path):
        pooled = tmp_path / "pool.json"
        from bitefuse.annotations import combine
        views = [parse_annotation_file(p) for p in sorted(sim_dir.glob("annotator_*.json"))]
        write_annotation_file(combine(views), pooled)
        out = tmp_path / "per.json"
        assert run("eval", "--pred", pooled, "--gt", fused, "--output", out, "--per-source") == 0
        reports = read_json(out)["reports"]
        assert [r["source"] for r in reports] == [f"annotator_{k}" for k in range(1, 7)]
        rows = list(csv.reader((tmp_path / "per.csv").open()))
        assert len(rows) == 7 and rows[0][0] == "source"

    def test_pr_curve_and_csv(self, sim_dir, fused, tmp_path):
        out = tmp_path / "ev.json"
        pr = tmp_path / "pr.csv"
        assert run("eval", "--pred", fused, "--gt", sim_dir / "gt.json", "--output", out, "--pr-curve", pr,
                   "--name", "consensus", "--iou", 0.5) == 0
        assert read_json(out)["reports"][0]["config"]["iou_threshold"] == 0.5
        header = next(csv.reader(pr.open()))
        assert header == ["source", "class", "recall", "precision", "confidence"]

    def test_ids_restrict(self, sim_dir, fused, tmp_path):
        ids = tmp_path / "test.txt"
        ids.write_text("img_00003\nimg_00010\n")
        out = tmp_path / "ev.json"
        assert run("eval", "--pred", fused, "--gt", sim_dir / "gt.json", "--output", out, "--ids", ids) == 0
        gt = parse_annotation_file(sim_dir / "gt.json").subset(["img_00003", "img_00010"])
        counts = {c: r["gt_count"] for c, r in read_json(out)["reports"][0]["classes"].items()}
        assert sum(counts.values()) == len(gt)
        ids.write_text("img_99999\n")
        assert run("eval", "--pred", fused, "--gt", sim_dir / "gt.json", "--output", out, "--ids", ids) == 3

    def test_empty_gt(self, tmp_path, gmm_fixture_set):
        gt = write_annotation_file(gmm_fixture_set.replace(annotations=()), tmp_path / "gt.json")
        pred = write_annotation_file(gmm_fixture_set, tmp_path / "p.json")
        assert run("eval", "--pred", pred, "--gt", gt, "--output", tmp_path / "o.json") == 3

    def test_class_space_mismatch(self, tmp_path, six_annotator_set):
        raw = write_annotation_file(six_annotator_set, tmp_path / "raw.json")
        merged = write_annotation_file(merge_grades(six_annotator_set), tmp_path / "m.json")
        assert run("eval", "--pred", raw, "--gt", merged, "--output", tmp_path / "o.json") == 3


class TestCi:
    def test_byte_identical(self, sim_dir, fused, tmp_path):
        args = ["ci", "--pred", fused, "--gt", sim_dir / "gt.json", "--seed", 3, "--iterations", 200,
                "--statistic", "map", "mf1", "ap:dentine_caries"]
        assert run(*args, "--output", tmp_path / "a.json") == 0
        assert run(*args, "--output", tmp_path / "b.json", "--jobs", 2) == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        rows = list(csv.reader((tmp_path / "a.csv").open()))
        assert rows[0] == ["source", "map", "mf1", "ap:dentine_caries"]
        assert all(" [" in cell and cell.endswith("]") for cell in rows[1][1:])

    def test_json_fields_and_oracle(self, sim_dir, fused, tmp_path):
        out = tmp_path / "ci.json"
        assert run("ci", "--pred", fused, "--gt", sim_dir / "gt.json", "--seed", 11, "--iterations", 300,
                   "--output", out) == 0
        iv = read_json(out)["intervals"][0]
        assert {"statistic", "point", "lower", "upper", "z0", "acceleration", "iterations", "seed",
                "degenerate"} <= set(iv)
        assert iv["iterations"] == 300 and iv["seed"] == 11 and iv["statistic"] == "map"
        # same replicates and jackknife values through the independent textbook formula
        matches = match_all(parse_annotation_file(fused), parse_annotation_file(sim_dir / "gt.json"))
        stat = _stat_fn(matches, "map", 0.0)
        n = len(matches.image_ids)
        reps = bootstrap_replicates(n, stat, 300, 11)
        lo, hi, _, _ = textbook_bca(iv["point"], reps.tolist(), jackknife_values(n, stat).tolist())
        assert iv["lower"] == pytest.approx(lo, abs=1e-12)
        assert iv["upper"] == pytest.approx(hi, abs=1e-12)

    def test_one_iteration(self, sim_dir, fused, tmp_path):
        out = tmp_path / "ci.json"
        assert run("ci", "--pred", fused, "--gt", sim_dir / "gt.json", "--seed", 1, "--iterations", 1,
                   "--output", out) == 0
        iv = read_json(out)["intervals"][0]
        assert iv["iterations"] == 1 and iv["lower"] <= iv["upper"]

    def test_unknown_statistic(self, sim_dir, fused, tmp_path):
        assert run("ci", "--pred", fused, "--gt", sim_dir / "gt.json", "--seed", 1, "--statistic", "auc",
                   "--output", tmp_path / "o.json") == 4

    def test_bad_iterations(self, sim_dir, fused, tmp_path):
        assert run("ci", "--pred", fused, "--gt", sim_dir / "gt.json", "--seed", 1, "--iterations", 0,
                   "--output", tmp_path / "o.json") == 4


class TestSplit:
    def test_ids_file(self, tmp_path):
        ids = tmp_path / "ids.txt"
        ids.write_text("".join(f"img_{i:05d}\n" for i in range(8342)))
        out = tmp_path / "folds"
        assert run("split", "--ids", ids, "--output-dir", out, "--seed", 0) == 0
        doc = read_json(out / "folds.json")
        sizes = np.bincount(list(doc["assignment"].values()))
        assert sorted(sizes.tolist(), reverse=True) == [1669, 1669, 1668, 1668, 1668]
        for i in range(5):
            parts = [set((out / f"iteration_{i}_{p}.txt").read_text().split()) for p in ("train", "val", "test")]
            assert sum(map(len, parts)) == 8342 and len(set.union(*parts)) == 8342
        assert read_json(out / "manifest.json")["fold_sizes"] == sizes.tolist()

    def test_from_annotations_with_patients(self, tmp_path):
        images = [ImageInfo(f"i{k}", 10, 10, patient_id=f"p{k // 2}") for k in range(12)]
        images[0] = ImageInfo("i0", 10, 10, "rejected", "p0")
        src = write_annotation_file(AnnotationSet(images, [ann("i3", "s", "enamel_caries", (1, 1, 2, 2))]),
                                    tmp_path / "a.json")
        out = tmp_path / "folds"
        assert run("split", "--input", src, "--output-dir", out, "--seed", 4, "--k", 3, "--group-by-patient") == 0
        assignment = read_json(out / "folds.json")["assignment"]
        assert "i0" not in assignment and len(assignment) == 11
        assert assignment["i2"] == assignment["i3"]

    def test_duplicate_ids(self, tmp_path):
        ids = tmp_path / "ids.txt"
        ids.write_text("a\nb\na\n")
        assert run("split", "--ids", ids, "--output-dir", tmp_path / "o", "--seed", 0, "--k", 2) == 3

    def test_too_many_folds(self, tmp_path):
        ids = tmp_path / "ids.txt"
        ids.write_text("a\nb\n")
        assert run("split", "--ids", ids, "--output-dir", tmp_path / "o", "--seed", 0, "--k", 5) == 4


class TestSimulateAndReport:
    def test_simulate_outputs(self, sim_dir):
        names = sorted(p.name for p in sim_dir.iterdir())
        assert names == sorted(["gt.json", "sim_config.json", "manifest.json"] +
                               [f"annotator_{k}.json" for k in range(1, 7)])
        assert read_json(sim_dir / "sim_config.json")["seed"] == 7

    def test_simulate_deterministic(self, sim_dir, tmp_path):
        again = tmp_path / "again"
        run("simulate", "--output-dir", again, "--seed", 7, "--n-images", 40, "--jitter", 4,
            "--miss-rate", 0.1, "--spurious-rate", 0.2, "--label-noise", 0.1)
        for p in sim_dir.glob("*.json"):
            if p.name != "manifest.json":
                assert (again / p.name).read_bytes() == p.read_bytes()

    def test_report_identical_folds(self, sim_dir, fused, tmp_path):
        paths = []
        for k in range(5):
            p = tmp_path / f"fold{k}.json"
            assert run("eval", "--pred", fused, "--gt", sim_dir / "gt.json", "--output", p, "--name", "model") == 0
            paths.append(p)
        out = tmp_path / "table.json"
        assert run("report", "--input", *paths, "--output", out) == 0
        summary = read_json(out)["summaries"][0]
        assert summary["n_folds"] == 5
        assert all(cell["std"] == 0 for cell in summary["macro"].values())
        rows = list(csv.reader((tmp_path / "table.csv").open()))
        assert rows[1][0] == "model" and all(c.endswith("± 0.000") for c in rows[1][1:])

    def test_report_needs_two(self, sim_dir, fused, tmp_path):
        p = tmp_path / "one.json"
        run("eval", "--pred", fused, "--gt", sim_dir / "gt.json", "--output", p)
        assert run("report", "--input", p, "--output", tmp_path / "t.json") == 3

    def test_report_rejects_non_report(self, sim_dir, tmp_path):
        assert run("report", "--input", sim_dir / "gt.json", sim_dir / "gt.json", "--output", tmp_path / "t.json") == 2


def test_console_script(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "bitefuse.cli", "simulate", "--output-dir", str(tmp_path),
                           "--seed", "1", "--n-images", "2"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "gt.json").exists()

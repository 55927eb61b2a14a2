import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitefuse.annotations import RAW_CLASSES, AnnotationSet, AnnotationValidationError, ImageInfo
from bitefuse.metrics import (
    ClassMismatchError,
    DetectionEvaluator,
    aggregate_folds,
    average_precision,
    evaluate,
    f1_fnr,
    format_mean_std,
    match_detections,
    pr_curve,
    report_row,
    reports_from_json,
    reports_to_json,
    summary_row,
    table_header,
)
from conftest import ann
from instances import CLASSES, random_instance, to_sets
from oracles import brute_force_evaluate

E = "enamel_caries"
D = "dentine_caries"
S = "secondary_lesion"
GT_BOX = (10, 10, 30, 30)


def _sets(preds, gts, images=("i",)):
    imgs = [ImageInfo(i, 200, 200) for i in images]
    return (AnnotationSet(imgs, [ann(*p) for p in preds]), AnnotationSet(imgs, [ann(*g) for g in gts]))


def _outcome(preds, gts, label=E, thr=0.3):
    p, g = _sets(preds, gts)
    return match_detections(p.annotations, g.annotations, label, thr, p.image_ids)


class TestMatching:
    def test_single_tp(self):
        o = _outcome([("i", "m", E, (10, 10, 30, 30), 0.9)], [("i", "gt", E, (10, 10, 30, 30))])
        assert (o.tp_count, o.fp_count, o.fn_count) == (1, 0, 0)
        # IoU 400/600
        o = _outcome([("i", "m", E, (10, 10, 40, 30), 0.9)], [("i", "gt", E, (10, 10, 30, 30))])
        assert o.tp_count == 1

    def test_second_prediction_on_same_gt_is_fp(self):
        o = _outcome([("i", "m", E, (10, 10, 30, 30), 0.9), ("i", "m", E, (11, 10, 31, 30), 0.8)],
                     [("i", "gt", E, GT_BOX)])
        assert o.is_tp.tolist() == [True, False]
        assert o.confidences.tolist() == [0.9, 0.8]

    def test_below_threshold_is_fp(self):
        gt = (0, 0, 100, 1)
        pred = (0, 0, 29, 1)  # IoU 0.29
        o = _outcome([("i", "m", E, pred, 1.0)], [("i", "gt", E, gt)])
        assert o.is_tp.tolist() == [False]
        o = _outcome([("i", "m", E, (0, 0, 30, 1), 1.0)], [("i", "gt", E, gt)])
        assert o.is_tp.tolist() == [True]

    def test_other_class_ignored(self):
        o = _outcome([("i", "m", D, GT_BOX, 1.0)], [("i", "gt", E, GT_BOX)], label=E)
        assert (o.tp_count, o.fp_count, o.fn_count) == (0, 0, 1)

    def test_prefers_highest_iou_unmatched(self):
        gts = [("i", "gt", E, (0, 0, 10, 10)), ("i", "gt", E, (4, 0, 14, 10))]
        preds = [("i", "m", E, (4, 0, 14, 10), 0.9), ("i", "m", E, (1, 0, 11, 10), 0.8)]
        o = _outcome(preds, gts)
        assert o.is_tp.tolist() == [True, True]
        assert o.matched_gt == [("i", 1), ("i", 0)]

    def test_threshold_one_only_identical(self):
        o = _outcome([("i", "m", E, GT_BOX, 1.0), ("i", "n", E, (10, 10, 30, 30.5), 0.5)],
                     [("i", "gt", E, GT_BOX), ("i", "gt", E, (10, 10, 30, 30.25))], thr=1.0)
        assert o.is_tp.tolist() == [True, False]

    def test_ties_break_by_image_then_box(self):
        p, g = _sets([("b", "m", E, (0, 0, 5, 5), 0.5), ("a", "m", E, (3, 0, 8, 5), 0.5),
                      ("a", "m", E, (0, 0, 5, 5), 0.5)], [], images=("a", "b"))
        o = match_detections(p.annotations, g.annotations, E, 0.3, p.image_ids)
        assert [o.image_ids[i] for i in o.image_index] == ["a", "a", "b"]


class TestAveragePrecision:
    def test_single_tp(self):
        assert average_precision(_outcome([("i", "m", E, GT_BOX, 0.9)], [("i", "gt", E, GT_BOX)])) == 1.0

    def test_fp_then_tp(self):
        o = _outcome([("i", "m", E, (100, 100, 120, 120), 0.9), ("i", "m", E, GT_BOX, 0.8)], [("i", "gt", E, GT_BOX)])
        assert average_precision(o) == 0.5

    def test_tp_then_fp(self):
        o = _outcome([("i", "m", E, GT_BOX, 0.9), ("i", "m", E, (100, 100, 120, 120), 0.8)], [("i", "gt", E, GT_BOX)])
        assert average_precision(o) == 1.0

    def test_no_gt(self):
        assert average_precision(_outcome([("i", "m", E, GT_BOX, 0.9)], [])) == 0.0

    def test_no_predictions(self):
        assert average_precision(_outcome([], [("i", "gt", E, GT_BOX)])) == 0.0

    def test_pr_curve_monotone_recall(self):
        o = _outcome([("i", "m", E, GT_BOX, 0.9), ("i", "m", E, (100, 100, 120, 120), 0.8),
                      ("i", "m", E, (50, 50, 70, 70), 0.7)],
                     [("i", "gt", E, GT_BOX), ("i", "gt", E, (50, 50, 70, 70))])
        c = pr_curve(o)
        assert np.all(np.diff(c.recall) >= 0)
        assert c.recall.tolist() == [0.5, 0.5, 1.0]
        assert c.precision.tolist() == pytest.approx([1.0, 0.5, 2 / 3])
        assert average_precision(o) == pytest.approx(0.5 + 0.5 * 2 / 3)


class TestF1FNR:
    def _o(self, tp, fp, fn):
        preds = [("i", f"m{k}", E, (10 * k, 0, 10 * k + 5, 5), 0.5) for k in range(tp)]
        preds += [("i", f"f{k}", E, (10 * k, 100, 10 * k + 5, 105), 0.5) for k in range(fp)]
        gts = [("i", "gt", E, (10 * k, 0, 10 * k + 5, 5)) for k in range(tp + fn)]
        return _outcome(preds, gts)

    def test_fnr_quarter(self):
        assert f1_fnr(self._o(3, 0, 1))[1] == 0.25

    def test_half_half(self):
        assert f1_fnr(self._o(1, 1, 1))[0] == 0.5

    def test_all_missed(self):
        assert f1_fnr(self._o(0, 0, 5)) == (0.0, 1.0)

    def test_confidence_threshold_filters(self):
        o = _outcome([("i", "m", E, GT_BOX, 0.4)], [("i", "gt", E, GT_BOX)])
        assert f1_fnr(o, 0.4) == (1.0, 0.0)
        assert f1_fnr(o, 0.5) == (0.0, 1.0)


class TestEvaluate:
    def test_identity(self, gmm_fixture_set):
        gt = gmm_fixture_set
        rep = evaluate(gt, gt)
        for name in (E, D):
            c = rep.classes[name]
            assert (c.ap, c.f1, c.fnr) == (1.0, 1.0, 0.0)
        assert rep.classes[S].excluded
        assert rep.included == [E, D]
        assert (rep.map, rep.mf1, rep.mfnr) == (1.0, 1.0, 0.0)
        assert math.isnan(rep.statistic(f"ap:{S}"))

    def test_empty_predictions(self, gmm_fixture_set):
        empty = gmm_fixture_set.replace(annotations=())
        rep = evaluate(empty, gmm_fixture_set)
        assert rep.map == 0.0 and rep.mfnr == 1.0 and rep.mf1 == 0.0

    def test_label_space_mismatch(self, six_annotator_set, gmm_fixture_set):
        with pytest.raises(ClassMismatchError):
            evaluate(six_annotator_set, gmm_fixture_set)

    def test_stray_class(self, gmm_fixture_set):
        with pytest.raises(ClassMismatchError):
            evaluate(gmm_fixture_set, gmm_fixture_set, classes=[E])

    def test_unknown_prediction_image(self, gmm_fixture_set):
        other = AnnotationSet([ImageInfo("zzz", 500, 500)], [ann("zzz", "m", E, (1, 1, 4, 4))])
        with pytest.raises(AnnotationValidationError):
            evaluate(other, gmm_fixture_set)

    def test_raw_space_allowed(self, six_annotator_set):
        rep = evaluate(six_annotator_set, six_annotator_set)
        assert rep.map == 1.0
        assert set(rep.class_names) <= {c.value for c in RAW_CLASSES}

    def test_bounds(self, gmm_fixture_set):
        rep = evaluate(gmm_fixture_set, gmm_fixture_set.replace(annotations=gmm_fixture_set.annotations[:2]))
        for c in rep.classes.values():
            assert 0 <= c.ap <= 1 and 0 <= c.f1 <= 1 and 0 <= c.fnr <= 1
            if not c.excluded:
                assert c.fnr == pytest.approx(1 - c.recall)
                assert c.tp + c.fn == c.gt_count

    def test_json_roundtrip(self, gmm_fixture_set):
        rep = evaluate(gmm_fixture_set, gmm_fixture_set, source="x")
        back = reports_from_json(reports_to_json([rep]))[0]
        assert back.to_dict() == rep.to_dict()
        assert math.isnan(back.classes[S].ap) is False  # excluded AP stays 0.0
        assert back.classes[S].excluded

    def test_table_rows(self, gmm_fixture_set):
        rep = evaluate(gmm_fixture_set, gmm_fixture_set, source="m")
        header = table_header(rep.class_names)
        row = report_row(rep)
        assert len(header) == len(row) == 1 + 3 * 4
        assert row[0] == "m" and row[header.index("map")] == "1.000"


class TestOracle:
    @pytest.mark.parametrize("seed", range(5))
    def test_random_instances(self, seed):
        rng = np.random.default_rng(seed)
        for _ in range(200):
            preds, gts = random_instance(rng)
            p, g = to_sets(preds, gts)
            thr = float(rng.choice([0.3, 0.5, 1.0]))
            conf = float(rng.choice([0.0, 0.5]))
            rep = evaluate(p, g, classes=CLASSES, iou_threshold=thr, confidence_threshold=conf)
            ref = brute_force_evaluate(preds, gts, CLASSES, thr, conf)
            for c in CLASSES:
                got, want = rep.classes[c], ref[c]
                assert (got.tp, got.fp, got.fn, got.gt_count) == (want["tp"], want["fp"], want["fn"], want["gt"])
                assert got.ap == pytest.approx(float(want["ap"]), abs=1e-12)
                assert got.f1 == pytest.approx(float(want["f1"]), abs=1e-12)
                assert got.fnr == pytest.approx(float(want["fnr"]), abs=1e-12)


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_monotone_confidence_transform(self, seed):
        rng = np.random.default_rng(seed)
        preds, gts = random_instance(rng)
        base = evaluate(*to_sets(preds, gts), classes=CLASSES)
        squashed = [(i, lab, b, c**3 * 0.5, s) for i, lab, b, c, s in preds]
        moved = evaluate(*to_sets(squashed, gts), classes=CLASSES)
        for c in CLASSES:
            assert moved.classes[c].ap == base.classes[c].ap

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_duplicated_across_images(self, seed):
        rng = np.random.default_rng(seed)
        preds, gts = random_instance(rng)
        # tied confidences interleave the copies by image id, so keep them distinct
        preds = [(i, lab, b, (k + 1) / 10, s) for k, (i, lab, b, _, s) in enumerate(p for p in preds if p[0] == "a")]
        gts = [g for g in gts if g[0] == "a"]
        base = evaluate(*to_sets(preds, gts), classes=CLASSES)
        doubled = evaluate(*to_sets(preds + [("b",) + p[1:] for p in preds], gts + [("b",) + g[1:] for g in gts]),
                           classes=CLASSES)
        for c in CLASSES:
            assert doubled.classes[c].ap == pytest.approx(base.classes[c].ap, abs=1e-12)


class TestAggregate:
    def _rep(self, value, source="m"):
        from bitefuse.metrics import ClassReport, EvaluationReport
        cls = {E: ClassReport(E, value, value, 1 - value, 1, 1, 1, 0, 0, 1)}
        return EvaluationReport(cls, value, value, 1 - value, 0.3, 0.0, source)

    def test_five_folds(self):
        values = (0.6, 0.6, 0.65, 0.65, 0.665)
        s = aggregate_folds([self._rep(v) for v in values])
        assert s.macro_mean["map"] == pytest.approx(0.633, abs=1e-3)
        # sample std by hand: sqrt(0.00378 / 4)
        assert s.macro_std["map"] == pytest.approx(statistics.stdev(values), abs=1e-12)
        assert s.macro_std["map"] == pytest.approx(0.0307, abs=1e-4)
        assert s.cell("map") == "0.633 ± 0.031"

    def test_two_folds(self):
        s = aggregate_folds([self._rep(0.4), self._rep(0.6)])
        assert s.macro_mean["map"] == pytest.approx(0.5)
        assert s.macro_std["map"] == pytest.approx(0.1414, abs=1e-4)

    def test_identical_zero_std(self, gmm_fixture_set):
        rep = evaluate(gmm_fixture_set, gmm_fixture_set)
        s = aggregate_folds([rep] * 5)
        assert all(v == 0 for v in s.macro_std.values())
        assert all(s.std[c][m] == 0 for c in (E, D) for m in ("ap", "f1", "fnr"))
        assert math.isnan(s.mean[S]["ap"])
        row = summary_row(s)
        assert "n/a" in row and "1.000 ± 0.000" in row

    def test_needs_two(self):
        with pytest.raises(ValueError):
            aggregate_folds([self._rep(0.5)])

    def test_heterogeneous_classes(self, gmm_fixture_set):
        rep = evaluate(gmm_fixture_set, gmm_fixture_set)
        with pytest.raises(ClassMismatchError):
            aggregate_folds([rep, self._rep(0.5)])

    def test_format(self):
        assert format_mean_std(0.6326, 0.0254) == "0.633 ± 0.025"


class TestEvaluator:
    def test_score_is_map(self, gmm_fixture_set):
        ev = DetectionEvaluator(iou_threshold=0.5).fit(gmm_fixture_set)
        assert ev.score(gmm_fixture_set) == 1.0
        assert ev.get_params()["iou_threshold"] == 0.5

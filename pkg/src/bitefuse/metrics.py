"""PASCAL-VOC style detection metrics.

Predictions are matched to ground truth per class in descending
confidence order, pooled over all images.  Average precision uses
all-points interpolation of the precision/recall curve; F1 and the
false-negative rate are read at a confidence threshold.

Every tally can be evaluated under per-image integer weights, which is
how bootstrap resamples (images drawn with multiplicity) and jackknife
deletions are evaluated without re-running the matcher.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .annotations import (
    MERGED,
    MERGED_CLASSES,
    Annotation,
    AnnotationSet,
    AnnotationValidationError,
    CariesClass,
)
from ._validation import check_annotation_set, check_interval
from .fusion import _iou_xyxy

METRICS = ("ap", "f1", "fnr")
MACRO_NAMES = {"ap": "map", "f1": "mf1", "fnr": "mfnr"}


class ClassMismatchError(AnnotationValidationError):
    pass


def _pred_key(a: Annotation):
    return (-a.confidence, a.image_id, a.box.as_tuple(), a.source_id)


@dataclass
class MatchOutcome:
    """Per-class matching result, predictions in processing order."""

    label: CariesClass
    image_ids: list[str]
    image_index: np.ndarray
    confidences: np.ndarray
    is_tp: np.ndarray
    matched_gt: list
    gt_per_image: np.ndarray
    iou_threshold: float

    @property
    def gt_count(self) -> int:
        return int(self.gt_per_image.sum())

    @property
    def tp_count(self) -> int:
        return int(self.is_tp.sum())

    @property
    def fp_count(self) -> int:
        return int(self.is_tp.size - self.is_tp.sum())

    @property
    def fn_count(self) -> int:
        return self.gt_count - self.tp_count

    def weighted(self, image_weights=None, confidence_threshold: float = 0.0):
        """(tp, fp, gt) weight arrays for kept predictions plus total GT weight."""
        keep = self.confidences >= confidence_threshold
        if image_weights is None:
            w = np.ones(self.is_tp.size)[keep]
            gt = float(self.gt_per_image.sum())
        else:
            image_weights = np.asarray(image_weights, dtype=float)
            w = image_weights[self.image_index[keep]]
            gt = float(self.gt_per_image @ image_weights)
        tp = self.is_tp[keep]
        nz = w > 0
        return np.where(tp, w, 0.0)[nz], np.where(tp, 0.0, w)[nz], gt


def match_detections(
    predictions: Iterable[Annotation],
    ground_truth: Iterable[Annotation],
    label,
    iou_threshold: float = 0.3,
    image_ids: Sequence[str] | None = None,
) -> MatchOutcome:
    """Greedy single-match assignment of one class's predictions.

    Predictions are visited by descending confidence (ties: image id,
    then box coordinates).  Each takes the still-unmatched ground-truth
    box of the same image and class with the highest IoU, provided that
    IoU is at least ``iou_threshold``; otherwise it is a false positive.
    """
    label = CariesClass.parse(label)
    preds = sorted((p for p in predictions if p.label is label), key=_pred_key)
    gts = [g for g in ground_truth if g.label is label]
    if image_ids is None:
        image_ids = sorted({a.image_id for a in preds} | {g.image_id for g in gts})
    index = {img: i for i, img in enumerate(image_ids)}

    gt_by_image: dict[str, list[tuple]] = {}
    for g in sorted(gts, key=lambda g: (g.image_id, g.box.as_tuple())):
        gt_by_image.setdefault(g.image_id, []).append(g.box.as_tuple())
    gt_per_image = np.zeros(len(image_ids), dtype=np.int64)
    for img, boxes in gt_by_image.items():
        gt_per_image[index[img]] = len(boxes)

    taken = {img: [False] * len(boxes) for img, boxes in gt_by_image.items()}
    is_tp = np.zeros(len(preds), dtype=bool)
    matched = []
    for k, p in enumerate(preds):
        boxes = gt_by_image.get(p.image_id, ())
        used = taken.get(p.image_id)
        best, best_iou = None, -1.0
        pb = p.box.as_tuple()
        for j, gb in enumerate(boxes):
            if used[j]:
                continue
            v = _iou_xyxy(pb, gb)
            if v > best_iou:
                best, best_iou = j, v
        if best is not None and best_iou >= iou_threshold:
            used[best] = True
            is_tp[k] = True
            matched.append((p.image_id, best))
        else:
            matched.append(None)
    return MatchOutcome(
        label=label,
        image_ids=list(image_ids),
        image_index=np.array([index[p.image_id] for p in preds], dtype=np.int64),
        confidences=np.array([p.confidence for p in preds], dtype=float),
        is_tp=is_tp,
        matched_gt=matched,
        gt_per_image=gt_per_image,
        iou_threshold=iou_threshold,
    )


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    confidence: np.ndarray


def pr_curve(outcome: MatchOutcome, image_weights=None) -> PRCurve:
    tp, fp, gt = outcome.weighted(image_weights)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    recall = ctp / gt if gt > 0 else np.zeros_like(ctp)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(ctp + cfp > 0, ctp / (ctp + cfp), 0.0)
    conf = outcome.confidences
    if image_weights is not None:
        conf = conf[np.asarray(image_weights)[outcome.image_index] > 0]
    return PRCurve(recall, precision, conf)


def average_precision(outcome: MatchOutcome, image_weights=None) -> float:
    """All-points interpolated AP; 0.0 when the class has no ground truth."""
    curve = pr_curve(outcome, image_weights)
    if curve.recall.size == 0 or curve.recall[-1] == 0:
        return 0.0
    mrec = np.concatenate(([0.0], curve.recall, [1.0]))
    mpre = np.concatenate(([0.0], curve.precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mpre[steps]))


def _tallies(outcome, confidence_threshold, image_weights):
    tp, fp, gt = outcome.weighted(image_weights, confidence_threshold)
    tp, fp = float(tp.sum()), float(fp.sum())
    return tp, fp, gt - tp, gt


def f1_fnr(outcome: MatchOutcome, confidence_threshold: float = 0.0, image_weights=None) -> tuple[float, float]:
    """F1 and false-negative rate using predictions with confidence >= threshold.

    F1 is 0 when precision + recall is 0; FNR is 0 when the class has no
    ground truth (callers flag that case).
    """
    tp, fp, fn, gt = _tallies(outcome, confidence_threshold, image_weights)
    return _f1(tp, fp, fn), (fn / gt if gt > 0 else 0.0)


def _f1(tp, fp, fn):
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class ClassReport:
    label: str
    ap: float
    f1: float
    fnr: float
    precision: float
    recall: float
    tp: float
    fp: float
    fn: float
    gt_count: float
    excluded: bool = False


@dataclass
class EvaluationReport:
    classes: dict[str, ClassReport]
    map: float
    mf1: float
    mfnr: float
    iou_threshold: float
    confidence_threshold: float
    source: str = "predictions"

    @property
    def class_names(self) -> list[str]:
        return list(self.classes)

    @property
    def included(self) -> list[str]:
        return [c for c, r in self.classes.items() if not r.excluded]

    def statistic(self, name: str) -> float:
        """Value of a named statistic: map|mf1|mfnr or '<ap|f1|fnr>:<class>'."""
        if name in ("map", "mf1", "mfnr"):
            return getattr(self, name)
        metric, _, cls = name.partition(":")
        if metric not in METRICS or cls not in self.classes:
            raise KeyError(f"unknown statistic {name!r}")
        r = self.classes[cls]
        return math.nan if r.excluded else getattr(r, metric)

    def to_dict(self) -> dict:
        def num(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        return {
            "source": self.source,
            "config": {
                "iou_threshold": self.iou_threshold,
                "confidence_threshold": self.confidence_threshold,
                "classes": self.class_names,
            },
            "classes": {c: {k: num(v) for k, v in asdict(r).items()} for c, r in self.classes.items()},
            "macro": {"map": num(self.map), "mf1": num(self.mf1), "mfnr": num(self.mfnr)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        def num(v):
            return math.nan if v is None else v

        classes = {c: ClassReport(**{k: num(v) for k, v in r.items()}) for c, r in d["classes"].items()}
        return cls(
            classes=classes,
            map=num(d["macro"]["map"]),
            mf1=num(d["macro"]["mf1"]),
            mfnr=num(d["macro"]["mfnr"]),
            iou_threshold=d["config"]["iou_threshold"],
            confidence_threshold=d["config"]["confidence_threshold"],
            source=d.get("source", "predictions"),
        )


def _nanmean(values):
    values = [v for v in values if not math.isnan(v)]
    return float(np.mean(values)) if values else math.nan


@dataclass
class MatchSet:
    """Matching results for every class of one prediction/GT pairing."""

    outcomes: dict[str, MatchOutcome]
    image_ids: list[str]
    iou_threshold: float
    source: str = "predictions"

    def report(self, confidence_threshold: float = 0.0, image_weights=None) -> EvaluationReport:
        classes = {}
        for name, outcome in self.outcomes.items():
            tp, fp, fn, gt = _tallies(outcome, confidence_threshold, image_weights)
            excluded = gt == 0
            classes[name] = ClassReport(
                label=name,
                ap=average_precision(outcome, image_weights),
                f1=_f1(tp, fp, fn),
                fnr=fn / gt if gt > 0 else 0.0,
                precision=tp / (tp + fp) if tp + fp > 0 else 0.0,
                recall=tp / gt if gt > 0 else 0.0,
                tp=_intish(tp),
                fp=_intish(fp),
                fn=_intish(fn),
                gt_count=_intish(gt),
                excluded=excluded,
            )
        included = [r for r in classes.values() if not r.excluded]
        return EvaluationReport(
            classes=classes,
            map=_nanmean([r.ap for r in included]),
            mf1=_nanmean([r.f1 for r in included]),
            mfnr=_nanmean([r.fnr for r in included]),
            iou_threshold=self.iou_threshold,
            confidence_threshold=confidence_threshold,
            source=self.source,
        )


def _intish(v):
    return int(v) if float(v).is_integer() else v


def _class_list(classes, pred_set, gt_set):
    if classes is None:
        classes = MERGED_CLASSES if gt_set.label_space == MERGED else sorted(
            {a.label for a in gt_set.annotations} | {a.label for a in pred_set.annotations},
            key=lambda c: c.value,
        )
    return [CariesClass.parse(c) for c in classes]


def match_all(
    pred_set: AnnotationSet,
    gt_set: AnnotationSet,
    classes=None,
    iou_threshold: float = 0.3,
    source: str = "predictions",
) -> MatchSet:
    check_interval(iou_threshold, "iou_threshold", 0.0, 1.0, closed_right=True)
    if pred_set.label_space != gt_set.label_space:
        raise ClassMismatchError(
            f"label spaces differ: predictions {pred_set.label_space!r}, ground truth {gt_set.label_space!r}"
        )
    classes = _class_list(classes, pred_set, gt_set)
    wanted = set(classes)
    for name, s in (("prediction", pred_set), ("ground-truth", gt_set)):
        stray = sorted({a.label.value for a in s.annotations} - {c.value for c in wanted})
        if stray:
            raise ClassMismatchError(f"{name} labels {stray} not in class list {[c.value for c in classes]}")
    unknown = sorted({a.image_id for a in pred_set.annotations} - set(gt_set.image_ids))
    if unknown:
        raise AnnotationValidationError(
            f"{len(unknown)} prediction image ids not in ground truth (e.g. {unknown[0]!r})"
        )
    image_ids = gt_set.image_ids
    outcomes = {
        c.value: match_detections(pred_set.annotations, gt_set.annotations, c, iou_threshold, image_ids)
        for c in classes
    }
    return MatchSet(outcomes, image_ids, iou_threshold, source)


def evaluate(
    pred_set: AnnotationSet,
    gt_set: AnnotationSet,
    classes=None,
    iou_threshold: float = 0.3,
    confidence_threshold: float = 0.0,
    source: str = "predictions",
) -> EvaluationReport:
    """Per-class AP/F1/FNR and their macro means over classes with ground truth."""
    check_interval(confidence_threshold, "confidence_threshold", 0.0, 1.0, closed_left=True, closed_right=True)
    return match_all(pred_set, gt_set, classes, iou_threshold, source).report(confidence_threshold)


class DetectionEvaluator(BaseEstimator):
    """Holds a ground-truth set and scores prediction sets against it.

    ``score`` returns mAP so the evaluator can rank candidate prediction
    sets the way sklearn scorers do.
    """

    def __init__(self, iou_threshold=0.3, confidence_threshold=0.0, classes=None):
        self.iou_threshold = iou_threshold
        self.confidence_threshold = confidence_threshold
        self.classes = classes

    def fit(self, X, y=None):
        self.ground_truth_ = check_annotation_set(X)
        return self

    def evaluate(self, predictions, source="predictions") -> EvaluationReport:
        check_is_fitted(self, "ground_truth_")
        predictions = check_annotation_set(predictions)
        return evaluate(predictions, self.ground_truth_, self.classes, self.iou_threshold,
                        self.confidence_threshold, source)

    def score(self, predictions, y=None) -> float:
        return self.evaluate(predictions).map


# -- fold aggregation --------------------------------------------------------


@dataclass
class FoldSummary:
    """Mean and sample standard deviation of every metric across folds."""

    classes: list[str]
    mean: dict[str, dict[str, float]]
    std: dict[str, dict[str, float]]
    n_folds: int
    source: str = "predictions"
    macro_mean: dict[str, float] = field(default_factory=dict)
    macro_std: dict[str, float] = field(default_factory=dict)

    def cell(self, metric: str, cls: str | None = None) -> str:
        if cls is None:
            return format_mean_std(self.macro_mean[metric], self.macro_std[metric])
        return format_mean_std(self.mean[cls][metric], self.std[cls][metric])

    def to_dict(self) -> dict:
        def num(v):
            return None if math.isnan(v) else v

        return {
            "source": self.source,
            "n_folds": self.n_folds,
            "classes": {
                c: {m: {"mean": num(self.mean[c][m]), "std": num(self.std[c][m])} for m in METRICS}
                for c in self.classes
            },
            "macro": {
                m: {"mean": num(self.macro_mean[m]), "std": num(self.macro_std[m])}
                for m in self.macro_mean
            },
        }


def _mean_std(values):
    values = [v for v in values if not math.isnan(v)]
    if not values:
        return math.nan, math.nan
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else math.nan
    return mean, std


def aggregate_folds(reports: Sequence[EvaluationReport]) -> FoldSummary:
    """Mean and (n-1) standard deviation per class and macro metric.

    Folds in which a class had no ground truth are left out of that
    class's cells.
    """
    if len(reports) < 2:
        raise ValueError("aggregate_folds needs at least two reports")
    classes = reports[0].class_names
    for r in reports[1:]:
        if r.class_names != classes:
            raise ClassMismatchError(f"class lists differ across folds: {classes} vs {r.class_names}")
    mean, std = {}, {}
    for c in classes:
        mean[c], std[c] = {}, {}
        for m in METRICS:
            mean[c][m], std[c][m] = _mean_std([r.statistic(f"{m}:{c}") for r in reports])
    macro_mean, macro_std = {}, {}
    for macro in ("map", "mf1", "mfnr"):
        macro_mean[macro], macro_std[macro] = _mean_std([getattr(r, macro) for r in reports])
    return FoldSummary(classes, mean, std, len(reports), reports[0].source, macro_mean, macro_std)


# -- rendering ---------------------------------------------------------------


def format_mean_std(mean: float, std: float) -> str:
    if math.isnan(mean):
        return "n/a"
    if math.isnan(std):
        return f"{mean:.3f}"
    return f"{mean:.3f} ± {std:.3f}"


def _fmt(v):
    return "n/a" if isinstance(v, float) and math.isnan(v) else f"{v:.3f}"


def table_header(classes: Sequence[str]) -> list[str]:
    header = ["source"]
    for m in METRICS:
        header += [f"{m}:{c}" for c in classes] + [MACRO_NAMES[m]]
    return header


def report_row(report: EvaluationReport) -> list[str]:
    row = [report.source]
    for m in METRICS:
        row += [_fmt(report.statistic(f"{m}:{c}")) for c in report.class_names]
        row.append(_fmt(getattr(report, MACRO_NAMES[m])))
    return row


def summary_row(summary: FoldSummary) -> list[str]:
    row = [summary.source]
    for m in METRICS:
        row += [summary.cell(m, c) for c in summary.classes]
        row.append(summary.cell(MACRO_NAMES[m]))
    return row


def rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def reports_to_json(reports: Sequence[EvaluationReport]) -> str:
    return json.dumps({"reports": [r.to_dict() for r in reports]}, indent=1) + "\n"


def reports_from_json(text: str) -> list[EvaluationReport]:
    doc = json.loads(text)
    if "reports" in doc:
        return [EvaluationReport.from_dict(d) for d in doc["reports"]]
    return [EvaluationReport.from_dict(doc)]

"""Consensus ground truth from multiple box annotators, and detector evaluation."""

__version__ = "0.1.0"

from .annotations import (  # noqa: E402
    Annotation,
    AnnotationSet,
    BoundingBox,
    CariesClass,
    ImageInfo,
    filter_dataset,
    merge_grades,
    parse_annotation_file,
    write_annotation_file,
)
from .bootstrap import BcaInterval, BootstrapConfig, bca_interval, compare_by_overlap  # noqa: E402
from .fusion import ConsensusFuser, FusionConfig, fuse_annotation_set, iou  # noqa: E402
from .metrics import DetectionEvaluator, EvaluationReport, aggregate_folds, evaluate  # noqa: E402
from .splits import FoldAssignment, ThreeWayKFold, make_folds, rotation  # noqa: E402

__all__ = [
    "Annotation",
    "AnnotationSet",
    "BcaInterval",
    "BootstrapConfig",
    "BoundingBox",
    "CariesClass",
    "ConsensusFuser",
    "DetectionEvaluator",
    "EvaluationReport",
    "FoldAssignment",
    "FusionConfig",
    "ImageInfo",
    "ThreeWayKFold",
    "aggregate_folds",
    "bca_interval",
    "compare_by_overlap",
    "evaluate",
    "filter_dataset",
    "fuse_annotation_set",
    "iou",
    "make_folds",
    "merge_grades",
    "parse_annotation_file",
    "rotation",
    "write_annotation_file",
]

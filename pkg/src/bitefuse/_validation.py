"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

import math
import numbers
from pathlib import Path

from .annotations import AnnotationSet, AnnotationValidationError, parse_annotation_file


def check_interval(value, name, low, high, closed_left=False, closed_right=False):
    if not isinstance(value, numbers.Real) or isinstance(value, bool) or not math.isfinite(value):
        raise ValueError(f"{name} must be a finite number, got {value!r}")
    ok_low = value >= low if closed_left else value > low
    ok_high = value <= high if closed_right else value < high
    if not (ok_low and ok_high):
        lb = "[" if closed_left else "("
        rb = "]" if closed_right else ")"
        raise ValueError(f"{name} must lie in {lb}{low}, {high}{rb}, got {value!r}")
    return float(value)


def check_positive(value, name):
    if not isinstance(value, numbers.Real) or isinstance(value, bool) or not (math.isfinite(value) and value > 0):
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")
    return float(value)


def check_positive_int(value, name):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_annotation_set(X, label_space=None) -> AnnotationSet:
    """Accept an AnnotationSet or a path to an annotation file."""
    if isinstance(X, (str, Path)):
        X = parse_annotation_file(X)
    if not isinstance(X, AnnotationSet):
        raise TypeError(f"expected an AnnotationSet or a file path, got {type(X).__name__}")
    if label_space is not None and X.label_space != label_space:
        raise AnnotationValidationError(
            f"expected a {label_space!r}-labeled set, got {X.label_space!r}"
        )
    return X

"""Seeded k-fold assignment and the train/validation/test rotation."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ._validation import check_positive_int

logger = logging.getLogger(__name__)


class PatientLeakageWarning(UserWarning):
    """Folds are built per image, so one patient's images may straddle folds."""


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    seed: int
    fold_of: Mapping[str, int]

    def folds(self) -> list[list[str]]:
        out = [[] for _ in range(self.k)]
        for image_id, f in self.fold_of.items():
            out[f].append(image_id)
        return out

    def sizes(self) -> list[int]:
        return [len(f) for f in self.folds()]

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "assignment": dict(self.fold_of)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, d) -> "FoldAssignment":
        return cls(int(d["k"]), int(d["seed"]), {str(k): int(v) for k, v in d["assignment"].items()})


def _check_seed(seed):
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)) or not 0 <= seed < 2**64:
        raise ValueError(f"seed must be an integer in [0, 2**64), got {seed!r}")
    return int(seed)


def make_folds(
    image_ids: Sequence[str],
    k: int = 5,
    seed: int = 0,
    patient_of: Mapping[str, str] | None = None,
) -> FoldAssignment:
    """Shuffle ids with a seeded generator and deal them round-robin into k folds.

    Ids are sorted before shuffling, so the result depends only on the id
    set and the seed.  With ``patient_of`` whole patients are dealt
    instead (each to the currently smallest fold), so fold sizes may then
    differ by more than one image.
    """
    k = check_positive_int(k, "k")
    seed = _check_seed(seed)
    ids = [str(i) for i in image_ids]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate image ids")
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the number of images ({len(ids)})")
    rng = np.random.default_rng(seed)

    if patient_of is None:
        warnings.warn(
            "splitting at image level; images of one patient may land in different folds",
            PatientLeakageWarning,
            stacklevel=2,
        )
        order = rng.permutation(len(ids))
        ordered = sorted(ids)
        fold_of = {ordered[j]: pos % k for pos, j in enumerate(order)}
        return FoldAssignment(k, seed, dict(sorted(fold_of.items())))

    missing = [i for i in ids if i not in patient_of]
    if missing:
        raise ValueError(f"{len(missing)} images lack a patient id (e.g. {missing[0]!r})")
    by_patient: dict[str, list[str]] = {}
    for i in sorted(ids):
        by_patient.setdefault(str(patient_of[i]), []).append(i)
    patients = sorted(by_patient)
    if k > len(patients):
        raise ValueError(f"k={k} exceeds the number of patients ({len(patients)})")
    sizes = [0] * k
    fold_of = {}
    for j in rng.permutation(len(patients)):
        f = min(range(k), key=lambda f: (sizes[f], f))
        for i in by_patient[patients[j]]:
            fold_of[i] = f
        sizes[f] += len(by_patient[patients[j]])
    return FoldAssignment(k, seed, dict(sorted(fold_of.items())))


def rotation(assignment: FoldAssignment, i: int) -> tuple[list[int], int, int]:
    """(train folds, validation fold, test fold) for iteration ``i``.

    Fold ``i`` tests, fold ``(i + 1) % k`` validates, the rest train.
    """
    k = assignment.k
    if not 0 <= i < k:
        raise ValueError(f"iteration {i} out of range for k={k}")
    test = i
    val = (i + 1) % k
    train = [f for f in range(k) if f not in (test, val)]
    return train, val, test


def rotation_ids(assignment: FoldAssignment, i: int) -> dict[str, list[str]]:
    train, val, test = rotation(assignment, i)
    folds = assignment.folds()
    return {
        "train": sorted(x for f in train for x in folds[f]),
        "val": sorted(folds[val]),
        "test": sorted(folds[test]),
    }


class ThreeWayKFold:
    """Cross-validation splitter yielding (train, validation, test) index arrays.

    Mirrors the sklearn splitter protocol (``split``/``get_n_splits``) but
    yields three index arrays per iteration instead of two.
    """

    def __init__(self, n_splits=5, random_state=0):
        self.n_splits = n_splits
        self.random_state = random_state

    def get_n_splits(self, X=None, y=None, groups=None):
        return self.n_splits

    def split(self, X, y=None, groups=None):
        ids = [str(i) for i in range(len(X))]
        patient_of = None if groups is None else {i: str(g) for i, g in zip(ids, groups)}
        if patient_of is None:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", PatientLeakageWarning)
                assignment = make_folds(ids, self.n_splits, self.random_state)
        else:
            assignment = make_folds(ids, self.n_splits, self.random_state, patient_of)
        for i in range(self.n_splits):
            parts = rotation_ids(assignment, i)
            yield tuple(np.array(sorted(int(x) for x in parts[p])) for p in ("train", "val", "test"))

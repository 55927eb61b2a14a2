import sys
from pathlib import Path

import pytest

from bitefuse.annotations import (
    RAW,
    Annotation,
    AnnotationSet,
    BoundingBox,
    CariesClass,
    ImageInfo,
)

sys.path.insert(0, str(Path(__file__).parent))

ANNOTATORS = [f"annotator_{k}" for k in range(1, 7)]


def ann(image, source, label, box, conf=1.0):
    return Annotation(image, source, CariesClass.parse(label), BoundingBox(*box), conf)


@pytest.fixture
def six_annotator_set():
    """Three images; each of six annotators draws two boxes per image.

    Boxes are two well-separated lesions jittered by a few pixels per
    annotator; labels are raw grades.
    """
    images = [ImageInfo(f"im{i}", 400, 300) for i in range(3)]
    shifts = [(0, 0), (2, -1), (-1, 2), (1, 1), (-2, 0), (0, -2)]
    grades = ["grade_1", "grade_2", "grade_3", "grade_4", "grade_5", "secondary_lesion"]
    annotations = []
    for i, img in enumerate(images):
        for k, src in enumerate(ANNOTATORS):
            dx, dy = shifts[k]
            annotations.append(ann(img.id, src, grades[(k + i) % 6], (50 + dx, 60 + dy, 110 + dx, 120 + dy)))
            annotations.append(ann(img.id, src, grades[(k + 2 * i) % 6], (250 + dy, 150 + dx, 300 + dy, 210 + dx)))
    return AnnotationSet(images, annotations, RAW)


@pytest.fixture
def gmm_fixture_set():
    """One image, six annotators with spread boxes on a single lesion (merged labels)."""
    img = ImageInfo("scan", 500, 500)
    boxes = [(100, 100, 160, 150), (104, 98, 170, 156), (96, 103, 158, 149),
             (110, 95, 166, 160), (99, 101, 155, 145), (102, 104, 164, 152)]
    labels = ["dentine_caries", "dentine_caries", "enamel_caries", "dentine_caries", "enamel_caries", "dentine_caries"]
    annotations = [ann("scan", s, lab, b) for s, lab, b in zip(ANNOTATORS, labels, boxes)]
    return AnnotationSet([img], annotations)

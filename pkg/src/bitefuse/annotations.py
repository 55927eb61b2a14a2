"""Data model for bitewing caries annotations.

Images, labeled boxes and whole annotation sets, plus JSON/CSV
(de)serialization, grade merging and dataset filtering.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)

RAW = "raw"
MERGED = "merged"
LABEL_SPACES = (RAW, MERGED)

ACCEPTED = "accepted"
REJECTED = "rejected"

CSV_FIELDS = (
    "image_id",
    "width",
    "height",
    "status",
    "patient_id",
    "label_space",
    "source_id",
    "label",
    "x_min",
    "y_min",
    "x_max",
    "y_max",
    "confidence",
)


class AnnotationError(ValueError):
    """Base class for annotation input problems."""


class AnnotationParseError(AnnotationError):
    """The file could not be read or a record is malformed."""

    def __init__(self, message, record=None, path=None):
        self.record = record
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if record is not None:
            where.append(f"record {record}")
        prefix = f"{': '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class AnnotationValidationError(AnnotationError):
    """Records parse but violate a data-model invariant."""


class InvalidBoxError(AnnotationValidationError):
    pass


class CariesClass(str, enum.Enum):
    GRADE_1 = "grade_1"
    GRADE_2 = "grade_2"
    GRADE_3 = "grade_3"
    GRADE_4 = "grade_4"
    GRADE_5 = "grade_5"
    SECONDARY_LESION = "secondary_lesion"
    UNKNOWN_GRADE = "unknown_grade"
    ENAMEL_CARIES = "enamel_caries"
    DENTINE_CARIES = "dentine_caries"

    def __str__(self):
        return self.value

    @classmethod
    def parse(cls, value) -> "CariesClass":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise AnnotationValidationError(f"unknown label {value!r}") from None

    def in_space(self, label_space: str) -> bool:
        return self in (RAW_CLASSES if label_space == RAW else MERGED_CLASSES)


RAW_CLASSES = (
    CariesClass.GRADE_1,
    CariesClass.GRADE_2,
    CariesClass.GRADE_3,
    CariesClass.GRADE_4,
    CariesClass.GRADE_5,
    CariesClass.SECONDARY_LESION,
    CariesClass.UNKNOWN_GRADE,
)
MERGED_CLASSES = (
    CariesClass.ENAMEL_CARIES,
    CariesClass.DENTINE_CARIES,
    CariesClass.SECONDARY_LESION,
)

# Most severe first.
RAW_SEVERITY = (
    CariesClass.GRADE_5,
    CariesClass.GRADE_4,
    CariesClass.GRADE_3,
    CariesClass.SECONDARY_LESION,
    CariesClass.GRADE_2,
    CariesClass.GRADE_1,
)
MERGED_SEVERITY = (
    CariesClass.DENTINE_CARIES,
    CariesClass.SECONDARY_LESION,
    CariesClass.ENAMEL_CARIES,
)

GRADE_MERGE = {
    CariesClass.GRADE_1: CariesClass.ENAMEL_CARIES,
    CariesClass.GRADE_2: CariesClass.ENAMEL_CARIES,
    CariesClass.GRADE_3: CariesClass.DENTINE_CARIES,
    CariesClass.GRADE_4: CariesClass.DENTINE_CARIES,
    CariesClass.GRADE_5: CariesClass.DENTINE_CARIES,
    CariesClass.SECONDARY_LESION: CariesClass.SECONDARY_LESION,
}


def default_severity(label_space: str) -> tuple[CariesClass, ...]:
    """Severity order, most severe first, for a label space."""
    if label_space == RAW:
        return RAW_SEVERITY
    if label_space == MERGED:
        return MERGED_SEVERITY
    raise AnnotationValidationError(f"unknown label space {label_space!r}")


def severity_rank(order: Sequence[CariesClass]) -> dict[CariesClass, int]:
    """Map each class to a rank where larger means more severe.

    Classes missing from ``order`` rank below every listed class.
    """
    n = len(order)
    return {CariesClass.parse(c): n - i for i, c in enumerate(order)}


@dataclass(frozen=True, order=True)
class BoundingBox:
    """Axis-aligned box in continuous pixel coordinates (origin top-left)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBoxError(f"non-finite box {coords}")
        if min(coords) < 0:
            raise InvalidBoxError(f"negative coordinate in box {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidBoxError(f"degenerate box {coords}")

    @classmethod
    def from_xywh(cls, x, y, w, h):
        return cls(x, y, x + w, y + h)

    @classmethod
    def from_cxcywh(cls, cx, cy, w, h):
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def as_list(self) -> list[float]:
        return list(self.as_tuple())


BOX_FORMATS = {
    "xyxy": BoundingBox,
    "xywh": BoundingBox.from_xywh,
    "cxcywh": BoundingBox.from_cxcywh,
}


@dataclass(frozen=True)
class ImageInfo:
    id: str
    width: float
    height: float
    status: str = ACCEPTED
    patient_id: str | None = None

    def __post_init__(self):
        if self.status not in (ACCEPTED, REJECTED):
            raise AnnotationValidationError(
                f"image {self.id!r}: status must be 'accepted' or 'rejected', got {self.status!r}"
            )
        for name in ("width", "height"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise AnnotationValidationError(f"image {self.id!r}: invalid {name} {v!r}")

    @property
    def rejected(self) -> bool:
        return self.status == REJECTED


@dataclass(frozen=True)
class Annotation:
    image_id: str
    source_id: str
    label: CariesClass
    box: BoundingBox
    confidence: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise AnnotationValidationError(
                f"confidence {self.confidence!r} outside [0, 1]"
            )

    @property
    def key(self):
        return (self.image_id, self.source_id, self.box, self.label)


@dataclass(frozen=True)
class AnnotationSet:
    """Immutable collection of images and their labeled boxes.

    All invariants are checked on construction: annotations reference
    known images, boxes lie inside their image, labels belong to
    ``label_space`` and ``(image_id, source_id, box, label)`` is unique.
    """

    images: tuple[ImageInfo, ...]
    annotations: tuple[Annotation, ...] = ()
    label_space: str = MERGED
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        if self.label_space not in LABEL_SPACES:
            raise AnnotationValidationError(
                f"label_space must be one of {LABEL_SPACES}, got {self.label_space!r}"
            )
        images = {}
        for img in self.images:
            if img.id in images:
                raise AnnotationValidationError(f"duplicate image id {img.id!r}")
            images[img.id] = img
        seen = set()
        for i, ann in enumerate(self.annotations):
            _check_annotation(ann, images, self.label_space, i)
            if ann.key in seen:
                raise AnnotationValidationError(
                    f"annotation {i}: duplicate (image_id, source_id, box, label) {ann.key}"
                )
            seen.add(ann.key)
        object.__setattr__(self, "_index", images)

    def image(self, image_id: str) -> ImageInfo:
        return self._index[image_id]

    def __contains__(self, image_id) -> bool:
        return image_id in self._index

    @property
    def image_ids(self) -> list[str]:
        return [img.id for img in self.images]

    @property
    def sources(self) -> list[str]:
        return sorted({a.source_id for a in self.annotations})

    @property
    def labels(self) -> list[CariesClass]:
        return [a.label for a in self.annotations]

    def by_image(self) -> dict[str, list[Annotation]]:
        """Annotations grouped by image, in image order; every image present."""
        out = {img.id: [] for img in self.images}
        for ann in self.annotations:
            out[ann.image_id].append(ann)
        return out

    def by_source(self) -> dict[str, "AnnotationSet"]:
        groups: dict[str, list[Annotation]] = {}
        for ann in self.annotations:
            groups.setdefault(ann.source_id, []).append(ann)
        return {s: self.replace(annotations=groups[s]) for s in sorted(groups)}

    def replace(self, **changes) -> "AnnotationSet":
        return replace(self, **changes)

    def subset(self, image_ids: Iterable[str]) -> "AnnotationSet":
        keep = set(image_ids)
        return AnnotationSet(
            images=[img for img in self.images if img.id in keep],
            annotations=[a for a in self.annotations if a.image_id in keep],
            label_space=self.label_space,
        )

    def __len__(self):
        return len(self.annotations)


def _check_annotation(ann, images, label_space, index):
    img = images.get(ann.image_id)
    if img is None:
        raise AnnotationValidationError(
            f"annotation {index}: unknown image_id {ann.image_id!r}"
        )
    if not ann.label.in_space(label_space):
        raise AnnotationValidationError(
            f"annotation {index}: label {ann.label.value!r} not in {label_space!r} label space"
        )
    b = ann.box
    if b.x_max > img.width or b.y_max > img.height:
        raise AnnotationValidationError(
            f"annotation {index}: box {b.as_tuple()} outside image "
            f"{ann.image_id!r} ({img.width} x {img.height})"
        )


def combine(sets: Sequence[AnnotationSet]) -> AnnotationSet:
    """Union of several annotation sets (e.g. one file per annotator).

    Images are merged by id; an image is rejected if any input rejects it.
    """
    if not sets:
        raise AnnotationValidationError("nothing to combine")
    spaces = {s.label_space for s in sets}
    if len(spaces) != 1:
        raise AnnotationValidationError(f"cannot combine label spaces {sorted(spaces)}")
    images: dict[str, ImageInfo] = {}
    for s in sets:
        for img in s.images:
            prev = images.get(img.id)
            if prev is None:
                images[img.id] = img
                continue
            if (prev.width, prev.height) != (img.width, img.height):
                raise AnnotationValidationError(
                    f"image {img.id!r} has conflicting sizes across inputs"
                )
            if img.rejected and not prev.rejected:
                images[img.id] = replace(prev, status=REJECTED)
            if prev.patient_id is None and img.patient_id is not None:
                images[img.id] = replace(images[img.id], patient_id=img.patient_id)
    annotations = [a for s in sets for a in s.annotations]
    return AnnotationSet(list(images.values()), annotations, spaces.pop())


# -- serialization -----------------------------------------------------------


def _number(value, what):
    if isinstance(value, bool):
        raise ValueError(f"{what} must be a number")
    if isinstance(value, str):
        value = value.strip()
    return float(value)


def _fmt_number(v: float):
    return int(v) if float(v).is_integer() and abs(v) < 2**53 else v


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt:
        fmt = fmt.lower()
    else:
        fmt = path.suffix.lower().lstrip(".")
    if fmt not in ("json", "csv"):
        raise AnnotationParseError(f"cannot infer format (json|csv) from {path.name!r}", path=path)
    return fmt


def parse_annotation_file(path, format: str | None = None, box_format: str | None = None) -> AnnotationSet:
    """Read an annotation file (JSON or CSV) into a validated AnnotationSet.

    ``box_format`` overrides the file's declared box format; ``xywh`` and
    ``cxcywh`` boxes are converted to corner form on load.
    """
    path = Path(path)
    fmt = _infer_format(path, format)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise AnnotationParseError("file not found", path=path) from None
    except (OSError, UnicodeDecodeError) as exc:
        raise AnnotationParseError(f"cannot read file ({exc})", path=path) from None
    try:
        if fmt == "json":
            return loads_json(text, box_format=box_format)
        return loads_csv(text, box_format=box_format)
    except AnnotationParseError as exc:
        if exc.path is None:
            raise AnnotationParseError(str(exc), path=path) from None
        raise
    except AnnotationValidationError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def loads_json(text: str, box_format: str | None = None) -> AnnotationSet:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationParseError(f"invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise AnnotationParseError("top level must be an object")
    label_space = doc.get("label_space", MERGED)
    box_format = box_format or doc.get("bbox_format", "xyxy")
    make_box = _box_maker(box_format)

    images = []
    for i, rec in enumerate(doc.get("images", [])):
        try:
            images.append(
                ImageInfo(
                    id=str(rec["id"]),
                    width=_number(rec["width"], "width"),
                    height=_number(rec["height"], "height"),
                    status=rec.get("status", ACCEPTED),
                    patient_id=None if rec.get("patient_id") is None else str(rec["patient_id"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, AnnotationValidationError):
                raise AnnotationValidationError(f"images[{i}]: {exc}") from None
            raise AnnotationParseError(f"malformed image record ({exc!r})", record=f"images[{i}]") from None

    annotations = []
    for i, rec in enumerate(doc.get("annotations", [])):
        where = f"annotations[{i}]"
        try:
            bbox = rec["bbox"]
            if not isinstance(bbox, list) or len(bbox) != 4:
                raise ValueError("bbox must be a list of four numbers")
            coords = [_number(v, "bbox") for v in bbox]
            image_id, source_id, label = str(rec["image_id"]), str(rec["source_id"]), rec["label"]
            confidence = _number(rec.get("confidence", 1.0), "confidence")
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationParseError(f"malformed annotation ({exc!r})", record=where) from None
        annotations.append(_make_annotation(image_id, source_id, label, coords, confidence, make_box, where))
    return _build_set(images, annotations, label_space)


def loads_csv(text: str, box_format: str | None = None) -> AnnotationSet:
    make_box = _box_maker(box_format or "xyxy")
    reader = csv.DictReader(text.splitlines())
    if reader.fieldnames is None:
        raise AnnotationParseError("missing CSV header")
    required = {"image_id", "width", "height", "source_id", "label", "x_min", "y_min", "x_max", "y_max"}
    missing = required - set(reader.fieldnames)
    if missing:
        raise AnnotationParseError(f"CSV header missing columns {sorted(missing)}", record="line 1")

    images: dict[str, ImageInfo] = {}
    annotations = []
    spaces = set()
    for line, row in enumerate(reader, start=2):
        where = f"line {line}"
        if None in row:
            raise AnnotationParseError("too many fields", record=where)
        try:
            image_id = row["image_id"]
            if not image_id:
                raise ValueError("empty image_id")
            width = _number(row["width"], "width")
            height = _number(row["height"], "height")
        except (TypeError, ValueError) as exc:
            raise AnnotationParseError(f"malformed row ({exc})", record=where) from None
        status = (row.get("status") or ACCEPTED).strip()
        patient = (row.get("patient_id") or "").strip() or None
        if row.get("label_space"):
            spaces.add(row["label_space"].strip())
        try:
            img = ImageInfo(image_id, width, height, status, patient)
        except AnnotationValidationError as exc:
            raise AnnotationValidationError(f"{where}: {exc}") from None
        prev = images.get(image_id)
        if prev is None:
            images[image_id] = img
        elif prev != img:
            raise AnnotationValidationError(f"{where}: image {image_id!r} metadata differs from earlier rows")

        if not row["source_id"] and not row["label"]:
            continue  # image-only row
        try:
            coords = [_number(row[k], k) for k in ("x_min", "y_min", "x_max", "y_max")]
            confidence = _number(row.get("confidence") or 1.0, "confidence")
        except (TypeError, ValueError) as exc:
            raise AnnotationParseError(f"malformed row ({exc})", record=where) from None
        annotations.append(
            _make_annotation(image_id, row["source_id"], row["label"], coords, confidence, make_box, where)
        )
    if len(spaces) > 1:
        raise AnnotationValidationError(f"mixed label spaces {sorted(spaces)}")
    label_space = spaces.pop() if spaces else _guess_space(annotations)
    return _build_set(list(images.values()), annotations, label_space)


def _guess_space(annotations):
    if any(a.label in RAW_CLASSES and a.label is not CariesClass.SECONDARY_LESION for a in annotations):
        return RAW
    return MERGED


def _box_maker(box_format):
    try:
        return BOX_FORMATS[box_format]
    except KeyError:
        raise AnnotationParseError(f"unknown box format {box_format!r}") from None


def _make_annotation(image_id, source_id, label, coords, confidence, make_box, where):
    try:
        return Annotation(image_id, str(source_id), CariesClass.parse(label), make_box(*coords), confidence)
    except AnnotationValidationError as exc:
        raise type(exc)(f"{where}: {exc}") from None


def _build_set(images, annotations, label_space):
    if label_space not in LABEL_SPACES:
        raise AnnotationValidationError(f"unknown label_space {label_space!r}")
    return AnnotationSet(images, annotations, label_space)


def to_json_dict(aset: AnnotationSet) -> dict:
    images = []
    for img in aset.images:
        rec = {
            "id": img.id,
            "width": _fmt_number(img.width),
            "height": _fmt_number(img.height),
            "status": img.status,
        }
        if img.patient_id is not None:
            rec["patient_id"] = img.patient_id
        images.append(rec)
    annotations = [
        {
            "image_id": a.image_id,
            "source_id": a.source_id,
            "label": a.label.value,
            "bbox": a.box.as_list(),
            "confidence": a.confidence,
        }
        for a in aset.annotations
    ]
    return {"images": images, "annotations": annotations, "label_space": aset.label_space}


def dumps_json(aset: AnnotationSet) -> str:
    return json.dumps(to_json_dict(aset), indent=1) + "\n"


def dumps_csv(aset: AnnotationSet) -> str:
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    by_image = aset.by_image()
    for img in aset.images:
        head = [img.id, _fmt_number(img.width), _fmt_number(img.height), img.status, img.patient_id or "", aset.label_space]
        anns = by_image[img.id]
        if not anns:
            writer.writerow(head + ["", "", "", "", "", "", ""])
        for a in anns:
            writer.writerow(head + [a.source_id, a.label.value, *map(repr, a.box.as_tuple()), repr(a.confidence)])
    return buf.getvalue()


def write_annotation_file(aset: AnnotationSet, path, format: str | None = None) -> Path:
    path = Path(path)
    fmt = _infer_format(path, format)
    text = dumps_json(aset) if fmt == "json" else dumps_csv(aset)
    path.write_text(text, encoding="utf-8")
    return path


# -- dataset operations ------------------------------------------------------


def merge_grades(aset: AnnotationSet) -> AnnotationSet:
    """Collapse raw grades into enamel (1-2) / dentine (3-5) caries."""
    if aset.label_space != RAW:
        raise AnnotationValidationError("merge_grades expects a raw-labeled set (already merged?)")
    annotations = []
    for a in aset.annotations:
        if a.label is CariesClass.UNKNOWN_GRADE:
            raise AnnotationValidationError(
                f"image {a.image_id!r} has an unknown_grade annotation; filter it out first"
            )
        annotations.append(replace(a, label=GRADE_MERGE[a.label]))
    return AnnotationSet(aset.images, _dedupe(annotations), MERGED)


def _dedupe(annotations):
    # Two raw grades of the same box by the same source collapse to one merged label.
    seen = set()
    out = []
    for a in annotations:
        if a.key in seen:
            logger.warning("dropping duplicate after grade merge: %s", a.key)
            continue
        seen.add(a.key)
        out.append(a)
    return out


@dataclass(frozen=True)
class FilterReport:
    """Per-category removal counts; categories may overlap."""

    n_input: int
    rejected: int
    unknown_grade: int
    excluded: int
    n_removed: int
    n_remaining: int
    unknown_exclude_ids: tuple[str, ...] = ()

    def as_dict(self):
        d = dict(self.__dict__)
        d["unknown_exclude_ids"] = list(self.unknown_exclude_ids)
        return d


def filter_dataset(
    aset: AnnotationSet,
    drop_rejected: bool = True,
    drop_unknown_grade_images: bool = True,
    exclude_ids: Iterable[str] = (),
) -> tuple[AnnotationSet, FilterReport]:
    """Remove rejected images, images with any unknown-grade box, and excluded ids."""
    exclude = set(exclude_ids)
    unknown_ids = sorted(exclude - set(aset.image_ids))
    if unknown_ids:
        logger.warning("%d excluded ids not present in the dataset", len(unknown_ids))

    has_unknown = {a.image_id for a in aset.annotations if a.label is CariesClass.UNKNOWN_GRADE}
    rejected = {img.id for img in aset.images if img.rejected}
    excluded = exclude & set(aset.image_ids)

    drop = set(excluded)
    if drop_rejected:
        drop |= rejected
    if drop_unknown_grade_images:
        drop |= has_unknown
    kept = aset.subset(i for i in aset.image_ids if i not in drop)
    report = FilterReport(
        n_input=len(aset.images),
        rejected=len(rejected) if drop_rejected else 0,
        unknown_grade=len(has_unknown) if drop_unknown_grade_images else 0,
        excluded=len(excluded),
        n_removed=len(drop),
        n_remaining=len(kept.images),
        unknown_exclude_ids=tuple(unknown_ids),
    )
    return kept, report


def label_counts(aset: AnnotationSet) -> Mapping[str, int]:
    return dict(sorted(Counter(a.label.value for a in aset.annotations).items()))

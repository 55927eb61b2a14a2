"""Synthetic multi-annotator scenes with known ground truth.

Ground-truth lesions are placed without overlap; each simulated
annotator then misses, jitters, relabels and hallucinates boxes
according to its profile.  Every image draws from its own seeded
stream, so outputs depend only on the configuration and seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .annotations import (
    MERGED,
    MERGED_CLASSES,
    Annotation,
    AnnotationSet,
    BoundingBox,
    ImageInfo,
)
from .fusion import _iou_xyxy

GT_SOURCE = "gt"
MAX_PLACEMENT_ATTEMPTS = 1000
SPURIOUS_MAX_IOU = 0.1


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class AnnotatorProfile:
    jitter_sigma: float = 2.0
    miss_rate: float = 0.0
    spurious_rate: float = 0.0
    label_confusion: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        if not self.jitter_sigma >= 0:
            raise ValueError("jitter_sigma must be >= 0")
        if not 0 <= self.miss_rate <= 1:
            raise ValueError("miss_rate must lie in [0, 1]")
        if not self.spurious_rate >= 0:
            raise ValueError("spurious_rate must be >= 0")
        if self.label_confusion is not None:
            m = np.asarray(self.label_confusion, dtype=float)
            n = len(MERGED_CLASSES)
            if m.shape != (n, n) or np.any(m < 0) or np.any(np.abs(m.sum(axis=1) - 1) > 1e-9):
                raise ValueError(f"label_confusion must be a {n}x{n} row-stochastic matrix")
            object.__setattr__(self, "label_confusion", tuple(tuple(float(v) for v in row) for row in m))

    def confusion(self) -> np.ndarray:
        if self.label_confusion is None:
            return np.eye(len(MERGED_CLASSES))
        return np.asarray(self.label_confusion)


@dataclass(frozen=True)
class SimulationConfig:
    n_images: int = 100
    width: float = 1000.0
    height: float = 600.0
    lesions_per_image: tuple[int, int] = (1, 4)
    box_size: tuple[float, float] = (30.0, 90.0)
    class_prior: tuple[float, float, float] = (0.4, 0.4, 0.2)
    profiles: tuple[AnnotatorProfile, ...] = field(default_factory=lambda: (AnnotatorProfile(),) * 6)
    min_separation: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.n_images < 0:
            raise ValueError("n_images must be >= 0")
        lo, hi = self.lesions_per_image
        if not 0 <= lo <= hi:
            raise ValueError("lesions_per_image must satisfy 0 <= min <= max")
        smin, smax = self.box_size
        if not 0 < smin <= smax or smax >= min(self.width, self.height):
            raise ValueError("box_size must satisfy 0 < min <= max < image side")
        prior = np.asarray(self.class_prior, dtype=float)
        if prior.shape != (len(MERGED_CLASSES),) or np.any(prior < 0) or abs(prior.sum() - 1) > 1e-9:
            raise ValueError("class_prior must be three non-negative weights summing to 1")
        object.__setattr__(self, "profiles", tuple(self.profiles))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = [c.value for c in MERGED_CLASSES]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationConfig":
        d = {k: v for k, v in d.items() if k != "classes"}
        d["profiles"] = tuple(
            AnnotatorProfile(**{**p, "label_confusion": None if p.get("label_confusion") is None
                                else tuple(map(tuple, p["label_confusion"]))})
            for p in d.get("profiles", ())
        )
        for key in ("lesions_per_image", "box_size", "class_prior"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def image_id(i: int) -> str:
    return f"img_{i:05d}"


def _base_seed(seed, rng):
    if rng is None:
        return int(seed)
    return int(rng.integers(0, 2**63))


def _separated(box, placed, margin):
    x0, y0, x1, y1 = box
    for p in placed:
        if x0 < p[2] + margin and p[0] < x1 + margin and y0 < p[3] + margin and p[1] < y1 + margin:
            return False
    return True


def _random_box(rng, width, height, size):
    w = rng.uniform(*size)
    h = rng.uniform(*size)
    x = rng.uniform(0, width - w)
    y = rng.uniform(0, height - h)
    return (x, y, x + w, y + h)


def generate_ground_truth(config: SimulationConfig, rng: np.random.Generator | None = None) -> AnnotationSet:
    """Non-overlapping lesion boxes with labels drawn from the class prior."""
    base = _base_seed(config.seed, rng)
    prior = np.asarray(config.class_prior, dtype=float)
    images, annotations = [], []
    for i in range(config.n_images):
        img_rng = np.random.default_rng([base, 0, i])
        iid = image_id(i)
        images.append(ImageInfo(iid, float(config.width), float(config.height)))
        n = int(img_rng.integers(config.lesions_per_image[0], config.lesions_per_image[1] + 1))
        placed = []
        for _ in range(n):
            for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
                box = _random_box(img_rng, config.width, config.height, config.box_size)
                if _separated(box, placed, config.min_separation):
                    break
            else:
                raise SimulationError(
                    f"could not place {n} separated boxes in a {config.width}x{config.height} image"
                )
            placed.append(box)
            label = MERGED_CLASSES[int(img_rng.choice(len(MERGED_CLASSES), p=prior))]
            annotations.append(Annotation(iid, GT_SOURCE, label, BoundingBox(*box)))
    return AnnotationSet(images, annotations, MERGED)


def _jitter(box, sigma, rng, width, height):
    if sigma == 0:
        return box
    for _ in range(100):
        x0, y0, x1, y1 = np.asarray(box) + rng.normal(0.0, sigma, 4)
        x0, x1 = sorted((min(max(x0, 0.0), width), min(max(x1, 0.0), width)))
        y0, y1 = sorted((min(max(y0, 0.0), height), min(max(y1, 0.0), height)))
        if x0 < x1 and y0 < y1:
            return (float(x0), float(y0), float(x1), float(y1))
    return box


def render_annotator(
    gt: AnnotationSet,
    profile: AnnotatorProfile,
    rng: np.random.Generator | None = None,
    source_id: str = "annotator_1",
    box_size: tuple[float, float] = (30.0, 90.0),
    seed: int = 0,
) -> AnnotationSet:
    """One annotator's noisy view of a ground-truth set."""
    base = _base_seed(seed, rng)
    confusion = profile.confusion()
    class_index = {c: k for k, c in enumerate(MERGED_CLASSES)}
    by_image = gt.by_image()
    out = []
    for i, img in enumerate(gt.images):
        img_rng = np.random.default_rng([base, 1, i])
        seen = set()
        for ann in by_image[img.id]:
            if img_rng.random() < profile.miss_rate:
                continue
            box = _jitter(ann.box.as_tuple(), profile.jitter_sigma, img_rng, img.width, img.height)
            label = MERGED_CLASSES[int(img_rng.choice(len(MERGED_CLASSES), p=confusion[class_index[ann.label]]))]
            a = Annotation(img.id, source_id, label, BoundingBox(*box))
            if a.key not in seen:
                seen.add(a.key)
                out.append(a)
        gt_boxes = [a.box.as_tuple() for a in by_image[img.id]]
        for _ in range(int(img_rng.poisson(profile.spurious_rate))):
            for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
                size = (box_size[0], min(box_size[1], img.width * 0.9, img.height * 0.9))
                box = _random_box(img_rng, img.width, img.height, size)
                if all(_iou_xyxy(box, g) <= SPURIOUS_MAX_IOU for g in gt_boxes):
                    break
            else:
                continue
            label = MERGED_CLASSES[int(img_rng.integers(len(MERGED_CLASSES)))]
            a = Annotation(img.id, source_id, label, BoundingBox(*box))
            if a.key not in seen:
                seen.add(a.key)
                out.append(a)
    return AnnotationSet(gt.images, out, gt.label_space)


def simulate(config: SimulationConfig) -> tuple[AnnotationSet, list[AnnotationSet]]:
    """Ground truth plus one annotation set per configured annotator profile."""
    gt = generate_ground_truth(config)
    views = [
        render_annotator(gt, profile, source_id=f"annotator_{k + 1}", box_size=config.box_size,
                         seed=_profile_seed(config.seed, k))
        for k, profile in enumerate(config.profiles)
    ]
    return gt, views


def _profile_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, 2, k]).generate_state(2, dtype=np.uint64)[0] >> 1)


@dataclass
class RecoveryReport:
    center_rmse: float
    edge_mae: float
    label_accuracy: float
    missed_gt_fraction: float
    spurious_fraction: float
    n_matched: int
    n_gt: int
    n_fused: int

    def as_dict(self):
        return asdict(self)


def score_fusion_against_truth(fused: AnnotationSet, gt: AnnotationSet, iou_threshold: float = 0.5) -> RecoveryReport:
    """How well a consensus set recovers simulated ground truth.

    Boxes are paired greedily by descending IoU (at least ``iou_threshold``)
    within each image.
    """
    if set(fused.image_ids) != set(gt.image_ids):
        raise ValueError("fused and ground-truth sets cover different images")
    f_by = fused.by_image()
    g_by = gt.by_image()
    sq_center, abs_edges, correct, n_matched = 0.0, 0.0, 0, 0
    n_gt = len(gt.annotations)
    n_fused = len(fused.annotations)
    for iid in gt.image_ids:
        fs, gs = f_by[iid], g_by[iid]
        pairs = sorted(
            ((_iou_xyxy(f.box.as_tuple(), g.box.as_tuple()), fi, gi)
             for fi, f in enumerate(fs) for gi, g in enumerate(gs)),
            key=lambda t: (-t[0], t[1], t[2]),
        )
        used_f, used_g = set(), set()
        for v, fi, gi in pairs:
            if v < iou_threshold:
                break
            if fi in used_f or gi in used_g:
                continue
            used_f.add(fi)
            used_g.add(gi)
            f, g = fs[fi].box, gs[gi].box
            (fx, fy), (gx, gy) = f.center, g.center
            sq_center += (fx - gx) ** 2 + (fy - gy) ** 2
            abs_edges += sum(abs(a - b) for a, b in zip(f.as_tuple(), g.as_tuple()))
            correct += fs[fi].label is gs[gi].label
            n_matched += 1
    return RecoveryReport(
        center_rmse=math.sqrt(sq_center / n_matched) if n_matched else math.nan,
        edge_mae=abs_edges / (4 * n_matched) if n_matched else math.nan,
        label_accuracy=correct / n_matched if n_matched else math.nan,
        missed_gt_fraction=(n_gt - n_matched) / n_gt if n_gt else 0.0,
        spurious_fraction=(n_fused - n_matched) / n_fused if n_fused else 0.0,
        n_matched=n_matched,
        n_gt=n_gt,
        n_fused=n_fused,
    )


def config_json(config: SimulationConfig) -> str:
    return json.dumps(config.to_dict(), indent=1) + "\n"

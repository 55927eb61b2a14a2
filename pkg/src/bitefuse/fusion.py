"""Multi-annotator box fusion.

Boxes drawn by several annotators on one image are grouped by overlap,
each box becomes a pair of per-axis Gaussians, the equal-weight mixture
of those Gaussians is inverted at a central probability mass to give
the consensus box, and the label is a severity-tie-broken plurality
vote.  Non-maximum suppression is kept as a baseline strategy.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from joblib import Parallel, delayed, effective_n_jobs
from scipy.special import erfc
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .annotations import (
    MERGED,
    Annotation,
    AnnotationSet,
    BoundingBox,
    CariesClass,
    default_severity,
    severity_rank,
)
from ._validation import check_annotation_set, check_interval, check_positive

logger = logging.getLogger(__name__)

#: Mass of a Gaussian within two standard deviations of its mean (2*Phi(2) - 1, rounded).
DEFAULT_MASS_P = 0.954500
QUANTILE_TOL = 1e-9
CONSENSUS_SOURCE = "consensus"
_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class FusionConfig:
    grouping_iou: float = 0.3
    mass_p: float = DEFAULT_MASS_P
    sigma_divisor: float = 4.0
    min_votes: int = 1
    strategy: str = "gmm"
    severity_order: tuple[CariesClass, ...] | None = None

    def __post_init__(self):
        check_interval(self.grouping_iou, "grouping_iou", 0.0, 1.0, closed_right=True)
        check_interval(self.mass_p, "mass_p", 0.0, 1.0)
        check_positive(self.sigma_divisor, "sigma_divisor")
        if int(self.min_votes) != self.min_votes or self.min_votes < 1:
            raise ValueError(f"min_votes must be a positive integer, got {self.min_votes!r}")
        if self.strategy not in ("gmm", "nms"):
            raise ValueError(f"strategy must be 'gmm' or 'nms', got {self.strategy!r}")
        if self.severity_order is not None:
            object.__setattr__(
                self, "severity_order", tuple(CariesClass.parse(c) for c in self.severity_order)
            )

    def severity(self, label_space: str = MERGED) -> tuple[CariesClass, ...]:
        return self.severity_order or default_severity(label_space)


# -- geometry ----------------------------------------------------------------


def _as_xyxy(box) -> tuple[float, float, float, float]:
    if isinstance(box, BoundingBox):
        return box.as_tuple()
    if isinstance(box, Annotation):
        return box.box.as_tuple()
    return tuple(box)


def _iou_xyxy(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def iou(a, b) -> float:
    """Intersection over union of two boxes (BoundingBox or xyxy sequences)."""
    return _iou_xyxy(_as_xyxy(a), _as_xyxy(b))


def canonical_order(annotations: Iterable[Annotation]) -> list[Annotation]:
    """Largest box first, then by coordinates, source and label."""
    return sorted(
        annotations,
        key=lambda a: (-a.box.area, a.box.as_tuple(), a.source_id, a.label.value),
    )


# -- grouping ----------------------------------------------------------------


class _Group:
    __slots__ = ("members",)

    def __init__(self, first):
        self.members = {first.source_id: first}

    def mean_box(self):
        boxes = [m.box.as_tuple() for m in self.members.values()]
        n = len(boxes)
        return tuple(sum(b[k] for b in boxes) / n for k in range(4))


def group_boxes(annotations: Sequence[Annotation], config: FusionConfig | None = None) -> list[list[Annotation]]:
    """Partition one image's annotations into groups of overlapping boxes.

    Annotations are visited in :func:`canonical_order`.  Each joins the
    first group whose running mean box overlaps it with IoU at least
    ``config.grouping_iou``.  A group holds at most one box per source:
    if the source is already present, the box with the larger IoU to the
    mean box keeps the slot (the incumbent wins ties) and the displaced
    box starts a new group.  A box that is turned away keeps scanning
    later groups and starts a new one if none accepts it.
    """
    config = config or FusionConfig()
    image_ids = {a.image_id for a in annotations}
    if len(image_ids) > 1:
        raise ValueError(f"group_boxes expects a single image, got {len(image_ids)}")
    thr = config.grouping_iou
    groups: list[_Group] = []
    for ann in canonical_order(annotations):
        box = ann.box.as_tuple()
        for g in groups:
            mean = g.mean_box()
            overlap = _iou_xyxy(box, mean)
            if overlap < thr:
                continue
            rival = g.members.get(ann.source_id)
            if rival is None:
                g.members[ann.source_id] = ann
                break
            if _iou_xyxy(rival.box.as_tuple(), mean) >= overlap:
                continue
            g.members[ann.source_id] = ann
            groups.append(_Group(rival))
            break
        else:
            groups.append(_Group(ann))
    return [canonical_order(g.members.values()) for g in groups]


# -- Gaussian mixture --------------------------------------------------------


@dataclass(frozen=True)
class GaussianComponent:
    mean: float
    sigma: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"invalid Gaussian component ({self.mean}, {self.sigma})")


@dataclass(frozen=True)
class AxisMixture:
    """Equal-weight mixture of 1-D Gaussians along one image axis."""

    components: tuple[GaussianComponent, ...]

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        if not self.components:
            raise ValueError("mixture needs at least one component")

    @property
    def weights(self) -> np.ndarray:
        n = len(self.components)
        return np.full(n, 1.0 / n)

    @property
    def means(self) -> np.ndarray:
        return np.array([c.mean for c in self.components])

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([c.sigma for c in self.components])

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (x[..., None] - self.means) / self.sigmas
        return (0.5 * erfc(-z / _SQRT2)).mean(axis=-1)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (x[..., None] - self.means) / self.sigmas
        return (np.exp(-0.5 * z * z) / (self.sigmas * math.sqrt(2 * math.pi))).mean(axis=-1)

    def quantile(self, q: float) -> float:
        return mixture_quantile(self, q)


def fit_axis_gaussian(lo: float, hi: float, sigma_divisor: float = 4.0) -> GaussianComponent:
    """Gaussian centred on an interval with sigma = length / sigma_divisor."""
    if not lo < hi:
        raise ValueError(f"degenerate interval [{lo}, {hi}]")
    return GaussianComponent((lo + hi) / 2.0, (hi - lo) / sigma_divisor)


def _mixture_quantiles(means: np.ndarray, sigmas: np.ndarray, qs: np.ndarray, tol: float = QUANTILE_TOL) -> np.ndarray:
    """Bisection for quantiles of several equal-weight mixtures at once.

    ``means`` and ``sigmas`` have shape (A, n), one mixture per row;
    returns shape (A, len(qs)).  Each row runs exactly the iterations its
    own bracket needs, so a row's result never depends on its batch.
    """
    means = np.atleast_2d(means)
    sigmas = np.atleast_2d(sigmas)
    qs = np.asarray(qs, dtype=float)
    lo0 = (means - 10 * sigmas).min(axis=1)
    hi0 = (means + 10 * sigmas).max(axis=1)
    shape = (means.shape[0], qs.size)
    lo = np.broadcast_to(lo0[:, None], shape).copy()
    hi = np.broadcast_to(hi0[:, None], shape).copy()
    width = hi0 - lo0
    with np.errstate(divide="ignore"):
        need = np.where(width > tol, np.ceil(np.log2(width / tol)), 0)
    need = np.minimum(need, 200)[:, None]
    m = means[:, None, :]
    s = sigmas[:, None, :] * _SQRT2
    for it in range(int(need.max(initial=0))):
        mid = 0.5 * (lo + hi)
        cdf = (0.5 * erfc((m - mid[..., None]) / s)).mean(axis=-1)
        active = it < need
        below = cdf < qs
        lo = np.where(active & below, mid, lo)
        hi = np.where(active & ~below, mid, hi)
    return 0.5 * (lo + hi)


def mixture_quantile(mix: AxisMixture, q: float) -> float:
    """x such that the mixture CDF equals q, to 1e-9 px."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {q!r}")
    return float(_mixture_quantiles(mix.means[None], mix.sigmas[None], np.array([q]))[0, 0])


def _axis_params(boxes: np.ndarray, sigma_divisor: float):
    # boxes: (n, 4) xyxy -> means/sigmas of shape (2, n), rows x then y
    lo = boxes[:, [0, 1]].T
    hi = boxes[:, [2, 3]].T
    if np.any(hi <= lo):
        raise ValueError("degenerate member box")
    return (lo + hi) / 2.0, (hi - lo) / sigma_divisor


def fuse_boxes_batch(groups, mass_p: float = DEFAULT_MASS_P, sigma_divisor: float = 4.0) -> list[tuple]:
    """Consensus xyxy boxes for many groups, solved together.

    Groups are bucketed by size so each bisection row is computed the
    same way whatever else is in the batch.
    """
    arrays = [np.asarray([_as_xyxy(b) for b in g], dtype=float) for g in groups]
    qs = np.array([(1.0 - mass_p) / 2.0, (1.0 + mass_p) / 2.0])
    buckets: dict[int, list[int]] = {}
    for i, arr in enumerate(arrays):
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise ValueError("need at least one box per group")
        buckets.setdefault(arr.shape[0], []).append(i)
    out: list = [None] * len(arrays)
    for idx in buckets.values():
        stacked = np.stack([arrays[i] for i in idx])  # (G, n, 4)
        lo = stacked[:, :, :2]
        hi = stacked[:, :, 2:]
        if np.any(hi <= lo):
            raise ValueError("degenerate member box")
        means = ((lo + hi) / 2.0).transpose(0, 2, 1).reshape(-1, stacked.shape[1])
        sigmas = ((hi - lo) / sigma_divisor).transpose(0, 2, 1).reshape(-1, stacked.shape[1])
        sol = _mixture_quantiles(means, sigmas, qs).reshape(len(idx), 2, 2)
        for i, r in zip(idx, sol):
            out[i] = (float(r[0, 0]), float(r[1, 0]), float(r[0, 1]), float(r[1, 1]))
    return out


def fuse_boxes(boxes, mass_p: float = DEFAULT_MASS_P, sigma_divisor: float = 4.0) -> tuple[float, float, float, float]:
    """Consensus xyxy box of raw coordinates (no clipping, any sign)."""
    return fuse_boxes_batch([boxes], mass_p, sigma_divisor)[0]


def _mixture_diagnostics(boxes, sigma_divisor):
    arr = np.asarray(boxes, dtype=float)
    means, sigmas = _axis_params(arr, sigma_divisor)
    return {
        "x_means": means[0].tolist(),
        "x_sigmas": sigmas[0].tolist(),
        "y_means": means[1].tolist(),
        "y_sigmas": sigmas[1].tolist(),
    }


def fuse_group(members: Sequence, config: FusionConfig | None = None) -> tuple[BoundingBox, dict]:
    """Fuse one group into a single box.

    Per axis, each member contributes a Gaussian fitted to its extent;
    the consensus interval is the central ``config.mass_p`` interval of
    their equal-weight mixture.  Diagnostics carry the per-axis mixture
    parameters.
    """
    config = config or FusionConfig()
    if not members:
        raise ValueError("cannot fuse an empty group")
    boxes = [_as_xyxy(m) for m in members]
    x0, y0, x1, y1 = fuse_boxes(boxes, config.mass_p, config.sigma_divisor)
    return BoundingBox(max(x0, 0.0), max(y0, 0.0), x1, y1), _mixture_diagnostics(boxes, config.sigma_divisor)


# -- labels ------------------------------------------------------------------


def vote_label(
    members: Sequence[Annotation],
    severity_order: Sequence[CariesClass] | None = None,
    min_votes: int = 1,
) -> tuple[CariesClass | None, dict[CariesClass, int]]:
    """Plurality label of a group, ties going to the more severe class.

    Returns ``(None, tally)`` when the group has fewer than ``min_votes``
    distinct sources.
    """
    if not members:
        raise ValueError("cannot vote on an empty group")
    tally = Counter(m.label for m in members)
    support = len({m.source_id for m in members})
    if support < min_votes:
        return None, dict(tally)
    rank = severity_rank(severity_order or default_severity(MERGED))
    best = max(tally, key=lambda c: (tally[c], rank.get(c, 0), c.value))
    return best, dict(tally)


# -- NMS baseline ------------------------------------------------------------


def nms(boxes, scores=None, iou_threshold: float = 0.3) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices in visit order.

    Equal scores are visited in input order, so with all-equal scores the
    first box always survives.
    """
    boxes = [_as_xyxy(b) for b in boxes]
    if scores is None:
        scores = [1.0] * len(boxes)
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep = []
    suppressed = set()
    for i in order:
        if i in suppressed:
            continue
        keep.append(i)
        for j in order:
            if j != i and j not in suppressed and j not in keep:
                if _iou_xyxy(boxes[i], boxes[j]) >= iou_threshold:
                    suppressed.add(j)
    return keep


def nms_fuse(members: Sequence, iou_threshold: float = 0.3) -> list[BoundingBox]:
    """NMS with all confidences equal, members visited in canonical order.

    Every surviving box is returned; for one overlapping group that is
    just the canonical-first member's box.
    """
    if not members:
        raise ValueError("cannot fuse an empty group")
    if all(isinstance(m, Annotation) for m in members):
        ordered = [m.box for m in canonical_order(members)]
    else:
        ordered = sorted(
            (m if isinstance(m, BoundingBox) else BoundingBox(*m) for m in members),
            key=lambda b: (-b.area, b.as_tuple()),
        )
    return [ordered[i] for i in nms(ordered, iou_threshold=iou_threshold)]


# -- whole-set fusion --------------------------------------------------------


@dataclass
class FusedGroup:
    members: list[Annotation]
    consensus_box: BoundingBox | None
    consensus_label: CariesClass | None
    vote_tally: dict[CariesClass, int]
    support: int
    dropped: bool = False
    diagnostics: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "members": [
                {"source_id": m.source_id, "label": m.label.value, "bbox": m.box.as_list()}
                for m in self.members
            ],
            "consensus_bbox": None if self.consensus_box is None else self.consensus_box.as_list(),
            "consensus_label": None if self.consensus_label is None else self.consensus_label.value,
            "vote_tally": {k.value: v for k, v in sorted(self.vote_tally.items(), key=lambda kv: kv[0].value)},
            "support": self.support,
            "dropped": self.dropped,
        }


def _plan_image(annotations, config, severity):
    groups = []
    for members in group_boxes(annotations, config):
        support = len({m.source_id for m in members})
        label, tally = vote_label(members, severity, config.min_votes)
        groups.append(FusedGroup(members, None, label, tally, support, dropped=label is None))
    return groups


def _fill_boxes(groups, config, bounds_of):
    """Assign consensus boxes to the kept groups (one batched solve for GMM)."""
    kept = [g for g in groups if not g.dropped]
    if config.strategy == "gmm":
        boxes = fuse_boxes_batch([g.members for g in kept], config.mass_p, config.sigma_divisor)
        for g, (x0, y0, x1, y1) in zip(kept, boxes):
            g.consensus_box = BoundingBox(max(x0, 0.0), max(y0, 0.0), x1, y1)
            g.diagnostics = _mixture_diagnostics([m.box.as_tuple() for m in g.members], config.sigma_divisor)
    else:
        for g in kept:
            g.consensus_box = nms_fuse(g.members, config.grouping_iou)[0]
    for g in kept:
        bounds = bounds_of(g)
        if bounds is not None:
            g.consensus_box = _clip(g.consensus_box, *bounds)


def fuse_image(annotations: Sequence[Annotation], config: FusionConfig, label_space: str = MERGED,
               bounds: tuple[float, float] | None = None) -> list[FusedGroup]:
    """Group and fuse the annotations of a single image."""
    groups = _plan_image(annotations, config, config.severity(label_space))
    _fill_boxes(groups, config, lambda g: bounds)
    return groups


def _clip(box: BoundingBox, width: float, height: float) -> BoundingBox:
    x0, y0, x1, y1 = box.as_tuple()
    return BoundingBox(max(x0, 0.0), max(y0, 0.0), min(x1, width), min(y1, height))


def _fuse_chunk(items, config, label_space):
    severity = config.severity(label_space)
    per_image = [_plan_image(anns, config, severity) for anns, _ in items]
    bounds = {id(g): b for (_, b), groups in zip(items, per_image) for g in groups}
    _fill_boxes([g for groups in per_image for g in groups], config, lambda g: bounds[id(g)])
    return per_image


def fuse_annotation_set(
    aset: AnnotationSet,
    config: FusionConfig | None = None,
    n_annotators: int | None = None,
    n_jobs: int = 1,
    return_groups: bool = False,
):
    """Fuse every image of a multi-source set into consensus annotations.

    Consensus annotations get ``source_id="consensus"`` and a confidence
    equal to the group's support divided by the number of sources that
    annotated the image (or ``n_annotators`` when given).  With
    ``return_groups`` the per-image :class:`FusedGroup` lists are returned
    as well.
    """
    config = config or FusionConfig()
    by_image = aset.by_image()
    items = [(by_image[img.id], (img.width, img.height)) for img in aset.images]
    if n_jobs == 1 or len(items) < 2:
        per_image = _fuse_chunk(items, config, aset.label_space)
    else:
        n_chunks = max(1, min(len(items), effective_n_jobs(n_jobs)))
        bounds = np.linspace(0, len(items), n_chunks + 1).astype(int)
        chunks = Parallel(n_jobs=n_jobs)(
            delayed(_fuse_chunk)(items[a:b], config, aset.label_space) for a, b in zip(bounds[:-1], bounds[1:])
        )
        per_image = [g for chunk in chunks for g in chunk]

    fused = []
    groups_by_image = {}
    for img, groups in zip(aset.images, per_image):
        groups_by_image[img.id] = groups
        n_src = n_annotators or len({a.source_id for a in by_image[img.id]})
        for g in groups:
            if g.dropped:
                continue
            fused.append(
                Annotation(img.id, CONSENSUS_SOURCE, g.consensus_label, g.consensus_box,
                           min(1.0, g.support / n_src))
            )
    fused = _dedupe_consensus(fused)
    out = AnnotationSet(aset.images, fused, aset.label_space)
    if return_groups:
        return out, groups_by_image
    return out


def _dedupe_consensus(annotations):
    seen = set()
    out = []
    for a in annotations:
        if a.key in seen:
            logger.debug("identical consensus boxes collapsed on %s", a.image_id)
            continue
        seen.add(a.key)
        out.append(a)
    return out


def diagnostics_dict(groups_by_image: dict[str, list[FusedGroup]], config: FusionConfig) -> dict:
    images = {}
    n_dropped = 0
    for image_id, groups in groups_by_image.items():
        images[image_id] = [g.as_dict() for g in groups]
        n_dropped += sum(g.dropped for g in groups)
    return {
        "config": config_dict(config),
        "n_groups": sum(len(g) for g in groups_by_image.values()),
        "n_dropped": n_dropped,
        "images": images,
    }


def config_dict(config: FusionConfig) -> dict:
    d = dict(config.__dict__)
    if config.severity_order is not None:
        d["severity_order"] = [c.value for c in config.severity_order]
    return d


class ConsensusFuser(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`fuse_annotation_set`.

    ``fit`` records the annotator roster; ``transform`` fuses any set
    in the same label space.  With ``denominator="roster"`` consensus
    confidence is support over the number of fitted sources instead of
    the per-image source count.

    Examples
    --------
    >>> fuser = ConsensusFuser(mass_p=0.9545)        # doctest: +SKIP
    >>> consensus = fuser.fit_transform(annotations)  # doctest: +SKIP
    """

    def __init__(self, grouping_iou=0.3, mass_p=DEFAULT_MASS_P, sigma_divisor=4.0, min_votes=1,
                 strategy="gmm", severity_order=None, denominator="image", n_jobs=1):
        self.grouping_iou = grouping_iou
        self.mass_p = mass_p
        self.sigma_divisor = sigma_divisor
        self.min_votes = min_votes
        self.strategy = strategy
        self.severity_order = severity_order
        self.denominator = denominator
        self.n_jobs = n_jobs

    def _config(self) -> FusionConfig:
        return FusionConfig(
            grouping_iou=self.grouping_iou,
            mass_p=self.mass_p,
            sigma_divisor=self.sigma_divisor,
            min_votes=self.min_votes,
            strategy=self.strategy,
            severity_order=None if self.severity_order is None else tuple(self.severity_order),
        )

    def fit(self, X, y=None):
        X = check_annotation_set(X)
        if self.denominator not in ("image", "roster"):
            raise ValueError(f"denominator must be 'image' or 'roster', got {self.denominator!r}")
        self.config_ = self._config()
        self.sources_ = X.sources
        self.label_space_ = X.label_space
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        X = check_annotation_set(X, label_space=self.label_space_)
        n = len(self.sources_) if self.denominator == "roster" and self.sources_ else None
        fused, groups = fuse_annotation_set(X, self.config_, n_annotators=n, n_jobs=self.n_jobs,
                                            return_groups=True)
        self.groups_ = groups
        return fused


__all__ = [
    "AxisMixture",
    "ConsensusFuser",
    "FusedGroup",
    "FusionConfig",
    "GaussianComponent",
    "canonical_order",
    "fit_axis_gaussian",
    "fuse_annotation_set",
    "fuse_boxes",
    "fuse_group",
    "group_boxes",
    "iou",
    "mixture_quantile",
    "nms",
    "nms_fuse",
    "vote_label",
]

"""Bias-corrected and accelerated (BCa) bootstrap intervals.

Images are the resampling unit.  Replicate ``b`` draws its indices
from a generator seeded with ``(seed, b)`` so results do not depend on
how replicates are spread over workers.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from statistics import NormalDist
from typing import Callable, Sequence

import numpy as np
from joblib import Parallel, delayed, effective_n_jobs

from .annotations import AnnotationSet
from ._validation import check_interval, check_positive_int
from .metrics import MatchSet, match_all

Z0_CLAMP = 4.0
MAX_REDRAWS = 10
_STD_NORMAL = NormalDist()


class UndefinedStatisticError(RuntimeError):
    """The statistic stayed undefined after the allowed redraws."""


def norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def norm_ppf(p: float) -> float:
    # stdlib inverse uses Wichura's AS241 rational approximation (~1e-16).
    if p <= 0.0:
        return -math.inf
    if p >= 1.0:
        return math.inf
    return _STD_NORMAL.inv_cdf(p)


@dataclass(frozen=True)
class BootstrapConfig:
    iterations: int = 1000
    confidence: float = 0.95
    seed: int = 0
    statistic: str = "map"

    def __post_init__(self):
        check_positive_int(self.iterations, "iterations")
        check_interval(self.confidence, "confidence", 0.0, 1.0)
        if isinstance(self.seed, bool) or not isinstance(self.seed, (int, np.integer)) or not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be an integer in [0, 2**64), got {self.seed!r}")


@dataclass(frozen=True)
class BcaInterval:
    point_estimate: float
    lower: float
    upper: float
    z0: float
    acceleration: float
    degenerate: bool = False
    z0_clamped: bool = False
    confidence: float = 0.95
    statistic: str = "statistic"
    iterations: int = 0
    seed: int | None = None

    def as_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "point": self.point_estimate,
            "lower": self.lower,
            "upper": self.upper,
            "z0": self.z0,
            "acceleration": self.acceleration,
            "iterations": self.iterations,
            "seed": self.seed,
            "confidence": self.confidence,
            "degenerate": self.degenerate,
            "z0_clamped": self.z0_clamped,
        }

    def cell(self) -> str:
        return format_interval(self)


def format_interval(iv: BcaInterval) -> str:
    return f"{iv.point_estimate:.3f} [{iv.lower:.3f}, {iv.upper:.3f}]"


# -- pure BCa arithmetic -----------------------------------------------------


def acceleration(jackknife_values) -> float:
    """Skewness-based acceleration from leave-one-out values.

    ``sum(d**3) / (6 * sum(d**2) ** 1.5)`` with ``d = mean - value``;
    zero when all values coincide.
    """
    jv = np.asarray(jackknife_values, dtype=float)
    jv = jv[~np.isnan(jv)]
    if jv.size == 0:
        return 0.0
    d = jv.mean() - jv
    den = float(np.sum(d * d)) ** 1.5
    if den == 0.0:
        return 0.0
    return float(np.sum(d**3) / (6.0 * den))


def bias_correction(theta_hat: float, replicates) -> float:
    """Normal quantile of the share of replicates below the estimate (ties count half)."""
    reps = np.asarray(replicates, dtype=float)
    share = (np.sum(reps < theta_hat) + 0.5 * np.sum(reps == theta_hat)) / reps.size
    return norm_ppf(float(share))


def percentile_interval(replicates, confidence: float = 0.95) -> tuple[float, float]:
    alpha = 1.0 - confidence
    lo, hi = np.quantile(np.asarray(replicates, dtype=float), [alpha / 2, 1 - alpha / 2])
    return float(lo), float(hi)


def bca_from_replicates(
    theta_hat: float,
    replicates,
    jackknife_values=None,
    confidence: float = 0.95,
    a: float | None = None,
    statistic: str = "statistic",
    seed: int | None = None,
) -> BcaInterval:
    """BCa interval from an existing replicate set.

    Pass either the jackknife values or the acceleration ``a`` directly.
    """
    reps = np.asarray(replicates, dtype=float)
    if reps.size == 0:
        raise ValueError("no bootstrap replicates")
    if a is None:
        a = acceleration(jackknife_values) if jackknife_values is not None else 0.0
    common = dict(confidence=confidence, statistic=statistic, iterations=int(reps.size), seed=seed)
    if np.all(reps == reps[0]):
        return BcaInterval(theta_hat, theta_hat, theta_hat, 0.0, a, degenerate=True, **common)

    z0 = bias_correction(theta_hat, reps)
    clamped = not math.isfinite(z0)
    if clamped:
        z0 = math.copysign(Z0_CLAMP, z0)
    alpha = 1.0 - confidence
    tails = (alpha / 2, 1 - alpha / 2)
    if z0 == 0.0 and a == 0.0:
        # the adjustment is the identity; skip the lossy cdf(ppf(.)) round trip
        levels = list(tails)
    else:
        levels = []
        for tail in tails:
            z = norm_ppf(tail)
            levels.append(norm_cdf(z0 + (z0 + z) / (1.0 - a * (z0 + z))))
    lower, upper = (float(v) for v in np.quantile(reps, levels))
    degenerate = clamped or not (lower <= theta_hat <= upper)
    return BcaInterval(theta_hat, lower, upper, z0, a, degenerate=degenerate, z0_clamped=clamped, **common)


# -- resampling machinery ----------------------------------------------------


def _draw(n: int, seed: int, b: int, stat: Callable[[np.ndarray], float]):
    rng = np.random.default_rng([seed, b])
    for _ in range(MAX_REDRAWS + 1):
        idx = rng.integers(0, n, n)
        value = stat(idx)
        if not math.isnan(value):
            return value
    raise UndefinedStatisticError(
        f"statistic undefined on replicate {b} after {MAX_REDRAWS} redraws"
    )


def bootstrap_replicates(
    n: int,
    stat: Callable[[np.ndarray], float],
    iterations: int,
    seed: int,
    n_jobs: int = 1,
) -> np.ndarray:
    """Statistic on ``iterations`` index resamples of ``range(n)``.

    ``stat`` maps an index array (with repeats) to a float; NaN marks an
    undefined resample, which is redrawn from the same replicate stream.
    """
    if n_jobs == 1 or iterations < 2:
        return np.array([_draw(n, seed, b, stat) for b in range(iterations)])
    edges = np.linspace(0, iterations, min(iterations, 4 * effective_n_jobs(n_jobs)) + 1).astype(int)
    chunks = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(lambda lo, hi: [_draw(n, seed, b, stat) for b in range(lo, hi)])(lo, hi)
        for lo, hi in zip(edges[:-1], edges[1:])
    )
    return np.array([v for chunk in chunks for v in chunk])


def jackknife_values(n: int, stat: Callable[[np.ndarray], float]) -> np.ndarray:
    if n < 2:
        raise ValueError("jackknife needs at least two observations")
    full = np.arange(n)
    return np.array([stat(np.delete(full, i)) for i in range(n)])


def bca_interval_sample(data, statistic: Callable, config: BootstrapConfig, n_jobs: int = 1) -> BcaInterval:
    """BCa interval for ``statistic(data)`` on a one-sample array."""
    data = np.asarray(data)
    n = len(data)

    def stat(idx):
        return float(statistic(data[idx]))

    theta = float(statistic(data))
    reps = bootstrap_replicates(n, stat, config.iterations, config.seed, n_jobs)
    jack = jackknife_values(n, stat)
    return bca_from_replicates(theta, reps, jack, config.confidence, statistic=config.statistic, seed=config.seed)


# -- detection statistics ----------------------------------------------------


def _weights(idx: np.ndarray, n: int) -> np.ndarray:
    return np.bincount(idx, minlength=n).astype(float)


def _stat_fn(matches: MatchSet, statistic: str, confidence_threshold: float):
    n = len(matches.image_ids)

    def stat(idx):
        return matches.report(confidence_threshold, _weights(idx, n)).statistic(statistic)

    return stat


def resample_statistic(
    pred_set: AnnotationSet,
    gt_set: AnnotationSet,
    image_ids: Sequence[str],
    statistic: str = "map",
    iou_threshold: float = 0.3,
    confidence_threshold: float = 0.0,
    matches: MatchSet | None = None,
) -> float:
    """Statistic on a multiset of test images; repeated ids count repeatedly.

    Returns NaN when the statistic is undefined on the resample.
    """
    matches = matches or match_all(pred_set, gt_set, iou_threshold=iou_threshold)
    position = {img: i for i, img in enumerate(matches.image_ids)}
    counts = Counter(image_ids)
    unknown = [i for i in counts if i not in position]
    if unknown:
        raise KeyError(f"resampled ids not in the test set: {unknown[:3]}")
    weights = np.zeros(len(position))
    for img, c in counts.items():
        weights[position[img]] = c
    return matches.report(confidence_threshold, weights).statistic(statistic)


def jackknife(
    pred_set: AnnotationSet,
    gt_set: AnnotationSet,
    statistic: str = "map",
    iou_threshold: float = 0.3,
    confidence_threshold: float = 0.0,
    matches: MatchSet | None = None,
) -> tuple[np.ndarray, float]:
    """Leave-one-image-out values and the resulting acceleration."""
    matches = matches or match_all(pred_set, gt_set, iou_threshold=iou_threshold)
    values = jackknife_values(len(matches.image_ids), _stat_fn(matches, statistic, confidence_threshold))
    return values, acceleration(values)


def bca_interval(
    pred_set: AnnotationSet | None,
    gt_set: AnnotationSet | None,
    config: BootstrapConfig,
    iou_threshold: float = 0.3,
    confidence_threshold: float = 0.0,
    n_jobs: int = 1,
    matches: MatchSet | None = None,
) -> BcaInterval:
    """BCa interval of a detection statistic over per-image resamples."""
    matches = matches or match_all(pred_set, gt_set, iou_threshold=iou_threshold)
    n = len(matches.image_ids)
    if n == 0:
        raise ValueError("empty test set")
    stat = _stat_fn(matches, config.statistic, confidence_threshold)
    theta = matches.report(confidence_threshold).statistic(config.statistic)
    if math.isnan(theta):
        raise UndefinedStatisticError(f"{config.statistic!r} is undefined on the full test set")
    reps = bootstrap_replicates(n, stat, config.iterations, config.seed, n_jobs)
    jack = jackknife_values(n, stat) if n >= 2 else np.zeros(1)
    return bca_from_replicates(theta, reps, jack, config.confidence,
                               statistic=config.statistic, seed=config.seed)


def compare_by_overlap(a: BcaInterval, b: BcaInterval) -> str:
    """'a_higher', 'b_higher' or 'not_significant' (closed intervals overlap)."""
    if a.statistic != b.statistic:
        raise ValueError(f"cannot compare {a.statistic!r} with {b.statistic!r}")
    if a.confidence != b.confidence:
        raise ValueError("intervals have different confidence levels")
    if a.lower > b.upper:
        return "a_higher"
    if b.lower > a.upper:
        return "b_higher"
    return "not_significant"


def intervals_to_json(rows: Sequence[tuple[str, BcaInterval]]) -> str:
    return json.dumps({"intervals": [{"source": s, **iv.as_dict()} for s, iv in rows]}, indent=1) + "\n"


__all__ = [
    "BcaInterval",
    "BootstrapConfig",
    "acceleration",
    "bca_from_replicates",
    "bca_interval",
    "bca_interval_sample",
    "compare_by_overlap",
    "jackknife",
    "percentile_interval",
    "resample_statistic",
]

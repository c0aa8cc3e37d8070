"""Confidence-based out-of-distribution metrics.

In-distribution samples are the positive class and the maximal softmax
confidence is the detection score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ValidationError

DEFAULT_BINS = 50


def _scores(values, name: str) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValidationError(f"{name} is empty")
    return v


def mmc(max_confidences) -> float:
    """Mean maximal confidence; a constant input returns that constant exactly."""
    v = _scores(max_confidences, "max_confidences")
    shift = float(v[0])
    return shift + math.fsum((v - shift).tolist()) / len(v)


def auroc(in_conf, out_conf) -> float:
    """Mann-Whitney AUC: P(in > out) + P(in == out) / 2, via average ranks."""
    pos, neg = _scores(in_conf, "in_conf"), _scores(out_conf, "out_conf")
    n, m = len(pos), len(neg)
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="mergesort")
    sorted_v = allv[order]
    # average rank (1-based) of each tie group, kept exact in half-integers
    starts = np.flatnonzero(np.r_[True, sorted_v[1:] != sorted_v[:-1]])
    ends = np.r_[starts[1:], len(sorted_v)]
    ranks = np.empty(len(allv))
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + 1 + e)
    u = ranks[:n].sum() - n * (n + 1) / 2.0
    return float(u / (n * m))


def fpr_at_tpr(in_conf, out_conf, tpr_target: float = 0.95) -> float:
    """FPR at the largest threshold ``t`` whose TPR (in >= t) reaches ``tpr_target``."""
    return fpr_at_tpr_with_threshold(in_conf, out_conf, tpr_target)[0]


def fpr_at_tpr_with_threshold(in_conf, out_conf, tpr_target: float = 0.95) -> Tuple[float, float]:
    if not 0.0 < tpr_target <= 1.0:
        raise ValidationError(f"tpr_target must lie in (0, 1], got {tpr_target}")
    pos, neg = _scores(in_conf, "in_conf"), _scores(out_conf, "out_conf")
    desc = np.sort(pos)[::-1]
    n = len(desc)
    # TPR at threshold desc[k] counts every in-score >= desc[k], ties included
    counts = np.searchsorted(-desc, -desc, side="right")
    ok = np.flatnonzero(counts / n >= tpr_target)
    t = desc[ok[0]]
    return float(np.mean(neg >= t)), float(t)


def roc_curve(in_conf, out_conf) -> List[Tuple[float, float, float]]:
    """``(fpr, tpr, threshold)`` for each distinct score in descending order.

    Starts at ``(0, 0, inf)``; the lowest threshold yields ``(1, 1)``.
    """
    pos, neg = _scores(in_conf, "in_conf"), _scores(out_conf, "out_conf")
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    pos_sorted, neg_sorted = np.sort(pos), np.sort(neg)
    tp = len(pos) - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = len(neg) - np.searchsorted(neg_sorted, thresholds, side="left")
    points = [(0.0, 0.0, float("inf"))]
    points += [(f / len(neg), t / len(pos), float(th)) for f, t, th in zip(fp, tp, thresholds)]
    return points


def trapezoid_area(points: Sequence[Tuple[float, float, float]]) -> float:
    area = 0.0
    for (f0, t0, _), (f1, t1, _) in zip(points[:-1], points[1:]):
        area += (f1 - f0) * (t0 + t1) / 2.0
    return area


def confidence_histogram(max_confidences, K: int, n_bins: int = DEFAULT_BINS) -> List[Tuple[float, float, int]]:
    """Equal-width bins over ``[1/K, 1]``; the last bin is closed on the right."""
    if n_bins < 1:
        raise ValidationError("n_bins must be at least 1")
    v = np.asarray(max_confidences, dtype=np.float64).ravel()
    lo = 1.0 / K
    if v.size and (v.min() < lo - 1e-9 or v.max() > 1.0):
        raise ValidationError(f"confidences must lie in [1/K, 1] = [{lo}, 1]")
    edges = np.linspace(lo, 1.0, n_bins + 1)
    counts, _ = np.histogram(np.clip(v, lo, 1.0), bins=edges)
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(n_bins)]


def temperature_confidence(logits, T: float) -> np.ndarray:
    """``softmax(logits / T)``."""
    if not T > 0:
        raise ValidationError(f"temperature must be positive, got {T}")
    z = np.asarray(logits, dtype=np.float64) / T
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class RankedSample:
    index: int
    predicted: int
    confidence: float


def rank_extremes(probs, k: int) -> Tuple[List[RankedSample], List[RankedSample]]:
    """The ``k`` most and ``k`` least confident samples (stable order on ties).

    ``probs`` is a ``[n, K]`` array of class probabilities.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n = len(probs)
    if not 0 <= k <= n:
        raise ValidationError(f"k={k} outside [0, {n}]")
    conf, pred = probs.max(axis=1), probs.argmax(axis=1)
    top = np.argsort(-conf, kind="stable")[:k]
    bottom = np.argsort(conf, kind="stable")[:k]

    def wrap(ix):
        return [RankedSample(int(i), int(pred[i]), float(conf[i])) for i in ix]

    return wrap(top), wrap(bottom)


@dataclass
class OutResult:
    mmc_out: float
    auroc: float
    fpr_at_95_tpr: float
    roc_points: List[Tuple[float, float, float]] = field(default_factory=list, repr=False)
    histogram: List[Tuple[float, float, int]] = field(default_factory=list, repr=False)


@dataclass
class EvalReport:
    mmc_in: float
    test_error: Optional[float]
    histogram_in: List[Tuple[float, float, int]]
    out: Dict[str, OutResult]

    def summary(self) -> dict:
        """JSON-ready dict without the bulky curve data."""
        return {
            "mmc_in": self.mmc_in,
            "test_error": self.test_error,
            "out": {name: {"mmc_out": r.mmc_out, "auroc": r.auroc, "fpr_at_95_tpr": r.fpr_at_95_tpr}
                    for name, r in self.out.items()},
        }


def evaluate_confidences(in_conf, out_confs: Dict[str, np.ndarray], K: int,
                         test_error: Optional[float] = None, n_bins: int = DEFAULT_BINS) -> EvalReport:
    in_conf = _scores(in_conf, "in_conf")
    out = {}
    for name, oc in out_confs.items():
        oc = _scores(oc, name)
        out[name] = OutResult(mmc(oc), auroc(in_conf, oc), fpr_at_tpr(in_conf, oc, 0.95),
                              roc_curve(in_conf, oc), confidence_histogram(oc, K, n_bins))
    return EvalReport(mmc(in_conf), test_error, confidence_histogram(in_conf, K, n_bins), out)

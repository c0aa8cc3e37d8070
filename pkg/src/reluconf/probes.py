"""Numerical probes of far-away confidence.

* alpha scaling: how far along the ray ``alpha * x`` a ReLU network must go
  before its confidence reaches a target;
* the dominant-row mechanism behind the asymptotic confidence of 1;
* the radius beyond which an RBF network is guaranteed near-uniform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import StabilizationError, ValidationError
from .geometry import DEFAULT_BETA_MAX, local_affine_map, ray_stabilization
from .models import RbfNetwork, ReluNetwork, confidence, log_max_confidence, predict_logits, rbf_forward

DEFAULT_ALPHA_MAX = 2.0 ** 63
UNIQUE_TOL = 1e-12


@dataclass
class AlphaScalingResult:
    direction_id: int
    alpha_found: Optional[float]
    confidence_at_alpha: Optional[float]
    region_stabilized: bool
    dominant_class: Optional[int]


def _log_conf_along(net: ReluNetwork, X: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    logits = predict_logits(net, alphas[:, None] * X)
    return log_max_confidence(logits), logits.argmax(axis=1)


def alpha_scaling_batch(net: ReluNetwork, X, target_conf: float = 0.999,
                        alpha_max: float = DEFAULT_ALPHA_MAX, check_region: bool = False,
                        rel_precision: float = 5e-4) -> List[AlphaScalingResult]:
    """Smallest ``alpha >= 1`` with ``max confidence(alpha * x) >= target_conf``, per row of ``X``.

    Doubling from ``alpha = 1`` brackets the crossing; bisection then narrows
    it to about three significant digits. Confidence is compared in log space
    so huge scales never overflow.
    """
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    K = net.num_classes
    if not 1.0 / K < target_conf < 1.0:
        raise ValidationError(f"target_conf must lie in (1/K, 1), got {target_conf}")
    if np.any(~X.any(axis=1)):
        raise ValidationError("directions must be non-zero")
    log_target = math.log(target_conf)
    n = len(X)
    hi = np.full(n, np.nan)
    alive = np.arange(n)
    alpha = 1.0
    while alive.size and alpha <= alpha_max:
        lc, _ = _log_conf_along(net, X[alive], np.full(alive.size, alpha))
        hit = lc >= log_target
        hi[alive[hit]] = alpha
        alive = alive[~hit]
        alpha *= 2.0
    found = np.flatnonzero(~np.isnan(hi))
    lo = np.where(hi > 1.0, hi / 2.0, hi)
    todo = found[hi[found] > 1.0]
    while todo.size:
        mid = 0.5 * (lo[todo] + hi[todo])
        lc, _ = _log_conf_along(net, X[todo], mid)
        ok = lc >= log_target
        hi[todo[ok]] = mid[ok]
        lo[todo[~ok]] = mid[~ok]
        todo = todo[(hi[todo] - lo[todo]) > rel_precision * hi[todo]]
    results = []
    lc_all = np.full(n, np.nan)
    cls_all = np.full(n, -1)
    if found.size:
        lc, cls = _log_conf_along(net, X[found], hi[found])
        lc_all[found], cls_all[found] = lc, cls
    for i in range(n):
        stab = bool(check_region and net.is_dense and ray_stabilization(net, X[i]).stabilized)
        if np.isnan(hi[i]):
            results.append(AlphaScalingResult(i, None, None, stab, None))
        else:
            results.append(AlphaScalingResult(i, float(hi[i]), float(np.exp(lc_all[i])), stab, int(cls_all[i])))
    return results


def alpha_scaling_search(net: ReluNetwork, x, target_conf: float = 0.999,
                         alpha_max: float = DEFAULT_ALPHA_MAX, direction_id: int = 0,
                         check_region: bool = True) -> AlphaScalingResult:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    res = alpha_scaling_batch(net, x, target_conf, alpha_max, check_region)[0]
    res.direction_id = direction_id
    return res


def summarize_alpha(results: Sequence[AlphaScalingResult]) -> dict:
    """Median alpha over successful searches plus the success rate."""
    found = [r.alpha_found for r in results if r.alpha_found is not None]
    return {
        "median_alpha": float(np.median(found)) if found else None,
        "success_rate": len(found) / len(results) if results else 0.0,
        "n_directions": len(results),
        "n_failed": len(results) - len(found),
    }


@dataclass
class DominantRow:
    k_star: int
    unique: bool
    margin: float


def dominant_row(V, x) -> DominantRow:
    """Row of ``V`` with the largest inner product with ``x`` (lowest index on ties)."""
    V = np.asarray(V, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64).ravel()
    scores = V @ x
    k = int(np.argmax(scores))
    if len(scores) < 2:
        return DominantRow(k, True, float("inf"))
    top2 = np.sort(scores)[-2:]
    margin = float(top2[1] - top2[0])
    return DominantRow(k, margin > UNIQUE_TOL, margin)


@dataclass
class ConfidenceSeries:
    alphas: np.ndarray
    confidences: np.ndarray
    alpha_star: float
    dominant: DominantRow


def asymptotic_confidence_check(net: ReluNetwork, x, alphas,
                                beta_max: Optional[float] = None) -> ConfidenceSeries:
    """Max confidence along ``alpha * x`` once the ray has settled into a region.

    Raises :class:`StabilizationError` when the ray does not stabilize.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    alphas = np.asarray(alphas, dtype=np.float64)
    beta_max = max(float(alphas.max()), 2.0, DEFAULT_BETA_MAX if beta_max is None else beta_max)
    stab = ray_stabilization(net, x, beta_max=beta_max)
    if not stab.stabilized:
        raise StabilizationError(f"ray did not stabilize below beta={beta_max:g}")
    amap = local_affine_map(net, stab.alpha_star * x)
    logits = predict_logits(net, alphas[:, None] * x)
    conf = np.exp(log_max_confidence(logits))
    return ConfidenceSeries(alphas, conf, stab.alpha_star, dominant_row(amap.V, x))


def projected_overconfidence(net: ReluNetwork, noise_batch, alpha, conf_threshold: float = 0.95) -> float:
    """Fraction of ``clip(alpha * x, 0, 1)`` with max confidence above the threshold.

    ``alpha`` is a scalar or one scale per row of ``noise_batch``.
    """
    x = np.asarray(noise_batch, dtype=np.float64)
    x = x.reshape(len(x), -1)
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha < 1):
        raise ValidationError(f"alpha must be at least 1, got {alpha.min()}")
    scale = alpha.reshape(-1, 1) if alpha.ndim else alpha
    z = np.clip(scale * x, 0.0, 1.0)
    _, conf, _ = confidence(net, z)
    return float(np.mean(conf > conf_threshold))


# ---------------------------------------------------------------------------
# RBF networks
# ---------------------------------------------------------------------------


def rbf_alpha_coefficient(rbf: RbfNetwork) -> float:
    """``max_{r,k} sum_l |coef[r, l] - coef[k, l]|``."""
    C = rbf.coefficients.data
    return float(np.abs(C[:, None, :] - C[None, :, :]).sum(axis=2).max())


def rbf_uniform_radius(rbf: RbfNetwork, epsilon: float) -> float:
    """Distance to the nearest center beyond which every confidence is within eps of 1/K."""
    if not epsilon > 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    alpha = rbf_alpha_coefficient(rbf)
    denom = math.log1p(rbf.num_classes * epsilon)
    if alpha <= denom:
        return 0.0
    return math.sqrt(math.log(alpha / denom) / rbf.gamma)


@dataclass
class RbfBoundCheck:
    r_min: float
    alpha_coef: float
    epsilon: float
    r_threshold: float
    applicable: bool
    within_band: bool

    @property
    def holds(self) -> bool:
        return (not self.applicable) or self.within_band


def verify_rbf_uniform_batch(rbf: RbfNetwork, X, epsilon: float):
    """Arrays ``(r_min, applicable, within_band)`` for the rows of ``X``."""
    X = np.asarray(X, dtype=np.float64).reshape(-1, rbf.centers.shape[1])
    r_thr = rbf_uniform_radius(rbf, epsilon)
    r_min = np.sqrt(rbf.sq_distances(X).min(axis=1))
    logits = rbf_forward(rbf, X).data
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    K = rbf.num_classes
    within = ((p >= 1.0 / K - epsilon) & (p <= 1.0 / K + epsilon)).all(axis=1)
    return r_min, r_min >= r_thr, within


def verify_rbf_uniform(rbf: RbfNetwork, x, epsilon: float) -> RbfBoundCheck:
    r_min, applicable, within = verify_rbf_uniform_batch(rbf, x, epsilon)
    return RbfBoundCheck(float(r_min[0]), rbf_alpha_coefficient(rbf), float(epsilon),
                         rbf_uniform_radius(rbf, epsilon), bool(applicable[0]), bool(within[0]))

"""L-infinity projected gradient ascent on the input.

Two objectives are supported: the maximal log confidence (adversarial noise,
the inner problem of ACET) and the cross-entropy of the true label
(adversarial samples). Each sample keeps the best iterate it has seen.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import DimensionError, ValidationError
from .models import ReluNetwork, _check_labels, cross_entropy, forward, max_log_confidence
from .tensor import Tape, Tensor

OBJECTIVES = ("max_confidence", "untargeted_ce")


@dataclass
class PgdConfig:
    epsilon: float = 0.3
    step_size: float = 0.0075
    iterations: int = 40
    restarts: int = 1
    objective: str = "max_confidence"
    clamp_box: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValidationError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.step_size <= 0 or (self.epsilon > 0 and self.step_size > 2 * self.epsilon):
            raise ValidationError(f"step_size must lie in (0, 2*epsilon], got {self.step_size}")
        if self.iterations < 1 or self.restarts < 1:
            raise ValidationError("iterations and restarts must be at least 1")
        if self.objective not in OBJECTIVES:
            raise ValidationError(f"objective must be one of {OBJECTIVES}")


def ball_bounds(z: np.ndarray, epsilon: float, clamp_box: bool) -> Tuple[np.ndarray, np.ndarray]:
    """Coordinate bounds of the eps-ball around ``z`` (intersected with [0, 1]).

    Rounded inward so that ``|u - z| <= epsilon`` holds exactly in floating point.
    """
    lo, hi = z - epsilon, z + epsilon
    if clamp_box:
        lo, hi = np.maximum(lo, 0.0), np.minimum(hi, 1.0)
    for _ in range(4):
        bad = (z - lo) > epsilon
        if not bad.any():
            break
        lo = np.where(bad, np.nextafter(lo, np.inf), lo)
    for _ in range(4):
        bad = (hi - z) > epsilon
        if not bad.any():
            break
        hi = np.where(bad, np.nextafter(hi, -np.inf), hi)
    return lo, hi


def _objective_fn(objective: str, labels) -> Callable[[Tensor], Tensor]:
    if objective == "max_confidence":
        return max_log_confidence
    return lambda logits: cross_entropy(logits, labels)


def objective_values(net: ReluNetwork, x, objective: str = "max_confidence", labels=None) -> np.ndarray:
    """Per-sample objective without recording a tape."""
    return _objective_fn(objective, labels)(forward(net, x)).data


def _value_and_grad(net: ReluNetwork, u: np.ndarray, fn) -> Tuple[np.ndarray, np.ndarray]:
    leaf = Tensor(u, requires_grad=True)
    with Tape() as tape:
        per_sample = fn(forward(net, leaf))
        T.sum_(per_sample)
    grads = tape.backward()
    return per_sample.data, grads[leaf]


def pgd(net: ReluNetwork, z, cfg: PgdConfig, labels=None) -> Tuple[np.ndarray, np.ndarray]:
    """Run PGD ascent and return ``(best points, best objective values)``.

    Restart 0 starts at ``z``; later restarts start uniformly in the ball.
    The update is ``u <- proj(u + step * sign(grad))`` and a coordinate with
    zero gradient does not move.
    """
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    if z.shape[1:] != net.input_shape and not (z.ndim == 2 and z.shape[1] == net.input_dim):
        raise DimensionError(f"input {z.shape} does not match network input {net.input_shape}")
    if cfg.objective == "untargeted_ce":
        if labels is None:
            raise ValidationError("untargeted_ce needs labels")
        labels = _check_labels(labels, net.num_classes, len(z))
    frozen = net.frozen()
    fn = _objective_fn(cfg.objective, labels)
    lo, hi = ball_bounds(z, cfg.epsilon, cfg.clamp_box)
    rng = np.random.default_rng(cfg.seed)
    best_u = z.copy()
    best_val = np.full(len(z), -np.inf)
    for r in range(cfg.restarts):
        if r == 0:
            u = np.clip(z, lo, hi)
        else:
            u = np.clip(z + rng.uniform(-cfg.epsilon, cfg.epsilon, size=z.shape), lo, hi)
        for _ in range(cfg.iterations):
            val, g = _value_and_grad(frozen, u, fn)
            better = val > best_val
            best_val = np.where(better, val, best_val)
            best_u[better] = u[better]
            u = np.clip(u + cfg.step_size * np.sign(g), lo, hi)
        val = fn(forward(frozen, u)).data
        better = val > best_val
        best_val = np.where(better, val, best_val)
        best_u[better] = u[better]
    return best_u, best_val


def pgd_max_confidence(net: ReluNetwork, z, cfg: PgdConfig) -> np.ndarray:
    """Points in the eps-ball around ``z`` with (approximately) maximal confidence."""
    if cfg.objective != "max_confidence":
        cfg = PgdConfig(**{**cfg.__dict__, "objective": "max_confidence"})
    return pgd(net, z, cfg)[0]


def pgd_adversarial_sample(net: ReluNetwork, x, y, cfg: PgdConfig) -> np.ndarray:
    """Untargeted adversarial examples maximizing the cross-entropy of ``y``."""
    y = _check_labels(y, net.num_classes, len(np.asarray(x.data if isinstance(x, Tensor) else x)))
    if cfg.objective != "untargeted_ce":
        cfg = PgdConfig(**{**cfg.__dict__, "objective": "untargeted_ce"})
    return pgd(net, x, cfg, labels=y)[0]


def batched(fn, x, batch_size: int = 500, **kwargs) -> np.ndarray:
    """Apply an attack chunk by chunk (labels passed through ``y``)."""
    y = kwargs.pop("y", None)
    outs = []
    for i in range(0, len(x), batch_size):
        if y is None:
            outs.append(fn(x[i:i + batch_size], **kwargs))
        else:
            outs.append(fn(x[i:i + batch_size], y[i:i + batch_size], **kwargs))
    return np.concatenate(outs)

"""Exact linear-region analysis for fully connected ReLU networks.

On the region containing ``x`` each pre-activation layer is an affine map
``f^(k)(z) = V^(k) z + a^(k)``; the region itself is the intersection of one
halfspace per hidden unit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import UnsupportedArchitectureError, ValidationError
from .models import Dense, Flatten, ReluNetwork

DEFAULT_BETA_MAX = 2.0 ** 40
INTERIOR_SLACK = 1e-6


def _dense_layers(net: ReluNetwork) -> List[Dense]:
    if not net.is_dense:
        kinds = sorted({l.kind for l in net.layers if not isinstance(l, (Dense, Flatten))})
        raise UnsupportedArchitectureError(f"region analysis supports dense layers only, found {kinds}")
    return [l for l in net.layers if isinstance(l, Dense)]


def _as_points(net: ReluNetwork, x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1 or x.shape == net.input_shape
    x = x.reshape(1 if single else x.shape[0], -1)
    if x.shape[1] != net.input_dim:
        raise ValidationError(f"points of dimension {x.shape[1]} for a {net.input_dim}-d network")
    return x, single


def preactivations(net: ReluNetwork, x) -> List[np.ndarray]:
    """Hidden pre-activations ``f^(1..L)`` for a batch ``[B, d]``."""
    layers = _dense_layers(net)
    h, _ = _as_points(net, x)
    pre = []
    for layer in layers[:-1]:
        z = h @ layer.W.data.T + layer.b.data
        pre.append(z)
        h = np.where(z > 0, z, layer.slope * z)
    return pre


@dataclass(frozen=True)
class ActivationPattern:
    """Per hidden layer, the sign (+1, -1, 0) of every pre-activation."""

    signs: Tuple[np.ndarray, ...]

    @property
    def flat(self) -> np.ndarray:
        if not self.signs:
            return np.zeros(0, dtype=np.int8)
        return np.concatenate(self.signs)

    def __len__(self) -> int:
        return int(sum(len(s) for s in self.signs))

    def key(self) -> bytes:
        return self.flat.tobytes()

    def __eq__(self, other) -> bool:
        return isinstance(other, ActivationPattern) and self.key() == other.key()

    def __hash__(self) -> int:
        return hash(self.key())


def patterns(net: ReluNetwork, x) -> np.ndarray:
    """Activation patterns of a batch as an int8 array ``[B, N]``."""
    pre = preactivations(net, x)
    if not pre:
        return np.zeros((np.asarray(x).reshape(-1, net.input_dim).shape[0], 0), dtype=np.int8)
    return np.sign(np.concatenate(pre, axis=1)).astype(np.int8)


def activation_pattern(net: ReluNetwork, x) -> ActivationPattern:
    pre = preactivations(net, np.asarray(x, dtype=np.float64).reshape(1, -1))
    return ActivationPattern(tuple(np.sign(z[0]).astype(np.int8) for z in pre))


@dataclass
class LocalAffineMap:
    """``f(z) = V z + a`` on the region of the anchor point."""

    V: np.ndarray
    a: np.ndarray
    layers: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return z @ self.V.T + self.a


def _affine_chain(net: ReluNetwork, x: np.ndarray):
    """Yield ``(V^(k), a^(k), f^(k)(x))`` for every layer, signs taken from the forward pass."""
    layers = _dense_layers(net)
    V, a = layers[0].W.data.copy(), layers[0].b.data.copy()
    z = layers[0].W.data @ x + layers[0].b.data
    chain = [(V, a, z)]
    for prev, layer in zip(layers[:-1], layers[1:]):
        gate = np.where(z > 0, 1.0, prev.slope)
        V = layer.W.data @ (gate[:, None] * V)
        a = layer.W.data @ (gate * a) + layer.b.data
        z = layer.W.data @ (gate * z) + layer.b.data
        chain.append((V, a, z))
    return chain


def local_affine_map(net: ReluNetwork, x, intermediates: bool = False) -> LocalAffineMap:
    """Compose the layer maps with the anchor's activation pattern.

    Units with a pre-activation of exactly zero are treated as inactive.
    With ``intermediates`` the maps of every pre-activation layer are kept.
    """
    x, _ = _as_points(net, x)
    chain = _affine_chain(net, x[0])
    V, a, _ = chain[-1]
    kept = [(Vk, ak) for Vk, ak, _ in chain] if intermediates else []
    return LocalAffineMap(V, a, kept)


@dataclass
class RegionDescription:
    """Halfspaces ``normal . z + offset >= 0``, one per hidden unit."""

    normals: np.ndarray
    offsets: np.ndarray
    layer: np.ndarray
    unit: np.ndarray

    def __len__(self) -> int:
        return len(self.offsets)

    def slacks(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return z @ self.normals.T + self.offsets

    def contains(self, z, tol: float = 0.0) -> np.ndarray:
        s = self.slacks(z)
        return (s >= -tol).all(axis=-1)

    def strictly_inside(self, z, slack: float = INTERIOR_SLACK) -> np.ndarray:
        return (self.slacks(z) > slack).all(axis=-1)

    def ray_extent(self, x, u) -> float:
        """Largest ``t`` with ``x + t u`` in the region (``inf`` if unbounded)."""
        s = self.slacks(x)
        rate = self.normals @ np.asarray(u, dtype=np.float64)
        shrinking = rate < 0
        if not shrinking.any():
            return float("inf")
        return float(np.min(s[shrinking] / -rate[shrinking]))


def region_halfspaces(net: ReluNetwork, x) -> RegionDescription:
    """Halfspace description of the linear region containing ``x``.

    A zero pre-activation gets sign -1, matching the inactive convention.
    """
    pts, _ = _as_points(net, x)
    chain = _affine_chain(net, pts[0])
    d = pts.shape[1]
    normals, offsets, layer_ix, unit_ix = [], [], [], []
    for l, (V, a, z) in enumerate(chain[:-1]):
        sign = np.where(z > 0, 1.0, -1.0)
        normals.append(sign[:, None] * V)
        offsets.append(sign * a)
        layer_ix.append(np.full(len(a), l))
        unit_ix.append(np.arange(len(a)))
    if not normals:
        empty = np.zeros(0, dtype=int)
        return RegionDescription(np.zeros((0, d)), np.zeros(0), empty, empty)
    return RegionDescription(np.concatenate(normals), np.concatenate(offsets),
                             np.concatenate(layer_ix), np.concatenate(unit_ix))


@dataclass
class RayStabilization:
    stabilized: bool
    alpha_star: Optional[float]
    pattern: Optional[ActivationPattern]
    betas_checked: int = 0


def ray_stabilization(net: ReluNetwork, direction, beta_max: float = DEFAULT_BETA_MAX,
                      n_sweep: int = 32) -> RayStabilization:
    """Find a scale ``alpha*`` past which ``beta * direction`` stays in one region.

    Candidates are the powers of two up to ``beta_max``; the smallest one whose
    pattern agrees with every later power of two and with ``n_sweep``
    geometrically spaced scales in ``[alpha*, beta_max]`` is returned.
    """
    x = np.asarray(direction, dtype=np.float64).reshape(-1)
    if not np.any(x):
        raise ValidationError("direction must be non-zero")
    if not beta_max > 1:
        raise ValidationError(f"beta_max must exceed 1, got {beta_max}")
    _dense_layers(net)
    n_pow = int(np.floor(np.log2(beta_max)))
    powers = 2.0 ** np.arange(n_pow + 1)
    if powers[-1] < beta_max:
        powers = np.append(powers, beta_max)
    pats = patterns(net, powers[:, None] * x[None, :])
    # suffix agreement: same[j] is True when pats[j:] are all identical
    same = np.zeros(len(powers), dtype=bool)
    same[-1] = True
    for j in range(len(powers) - 2, -1, -1):
        same[j] = same[j + 1] and np.array_equal(pats[j], pats[j + 1])
    checked = len(powers)
    for j in range(len(powers) - 1):
        if not same[j]:
            continue
        sweep = np.geomspace(powers[j], beta_max, n_sweep)
        sp = patterns(net, sweep[:, None] * x[None, :])
        checked += n_sweep
        if (sp == pats[j]).all():
            signs = _split(net, pats[j])
            return RayStabilization(True, float(powers[j]), ActivationPattern(signs), checked)
    return RayStabilization(False, None, None, checked)


def _split(net: ReluNetwork, flat: np.ndarray) -> Tuple[np.ndarray, ...]:
    widths = [l.W.shape[0] for l in _dense_layers(net)[:-1]]
    return tuple(np.split(flat, np.cumsum(widths)[:-1])) if widths else ()


@dataclass
class RegionRaster:
    xs: np.ndarray
    ys: np.ndarray
    ids: np.ndarray
    count: int

    def rows(self):
        """``(x, y, region_id)`` for every cell center, row-major in y then x."""
        for i, y in enumerate(self.ys):
            for j, x in enumerate(self.xs):
                yield float(x), float(y), int(self.ids[i, j])


def enumerate_regions_2d(net: ReluNetwork, bbox: Sequence[float], grid_resolution: int) -> RegionRaster:
    """Label a ``grid_resolution``-square raster over ``bbox=(x0, x1, y0, y1)`` by region."""
    if net.input_dim != 2:
        raise ValidationError(f"region raster needs a 2-d input, network has {net.input_dim}")
    if grid_resolution < 1:
        raise ValidationError("grid_resolution must be positive")
    x0, x1, y0, y1 = map(float, bbox)
    n = int(grid_resolution)
    xs = x0 + (np.arange(n) + 0.5) * (x1 - x0) / n
    ys = y0 + (np.arange(n) + 0.5) * (y1 - y0) / n
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    pats = patterns(net, pts)
    ids = np.zeros(len(pts), dtype=np.int64)
    seen: Dict[bytes, int] = {}
    for i, row in enumerate(pats):
        ids[i] = seen.setdefault(row.tobytes(), len(seen))
    return RegionRaster(xs, ys, ids.reshape(n, n), len(seen))

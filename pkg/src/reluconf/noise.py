"""Out-distribution noise: permuted training images and uniform noise, low-pass
filtered and contrast rescaled back to [0, 1]."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import ValidationError


@dataclass
class NoiseConfig:
    image_shape: Tuple[int, ...] = (1, 28, 28)
    permuted_fraction: float = 0.5
    sigma_range: Tuple[float, float] = (1.0, 2.5)
    seed: int = 0

    def __post_init__(self):
        self.image_shape = tuple(int(s) for s in self.image_shape)
        self.sigma_range = (float(self.sigma_range[0]), float(self.sigma_range[1]))
        lo, hi = self.sigma_range
        if lo < 0 or lo > hi:
            raise ValidationError(f"invalid sigma_range {self.sigma_range}")
        if not 0.0 <= self.permuted_fraction <= 1.0:
            raise ValidationError(f"permuted_fraction must lie in [0, 1], got {self.permuted_fraction}")


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-d Gaussian taps on ``[-ceil(3 sigma), ceil(3 sigma)]``."""
    if sigma < 0:
        raise ValidationError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return np.ones(1)
    radius = int(math.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _reflect_index(i: np.ndarray, n: int) -> np.ndarray:
    # half-sample symmetric reflection (edge pixel repeated): -1 -> 0, n -> n-1
    period = 2 * n
    i = np.mod(i, period)
    return np.where(i < n, i, period - 1 - i)


def blur_matrix(n: int, sigma: float) -> np.ndarray:
    """The ``n x n`` linear operator of 1-d smoothing with reflect padding."""
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    rows = np.repeat(np.arange(n), len(k))
    cols = _reflect_index(rows + np.tile(np.arange(-r, r + 1), n), n)
    M = np.zeros((n, n))
    np.add.at(M, (rows, cols), np.tile(k, n))
    return M


def gaussian_lowpass(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing over the last two axes; ``sigma=0`` is the identity."""
    image = np.asarray(image, dtype=np.float64)
    if sigma < 0:
        raise ValidationError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return image.copy()
    H, W = image.shape[-2:]
    Mr = blur_matrix(H, sigma)
    Mc = Mr if W == H else blur_matrix(W, sigma)
    return Mr @ image @ Mc.T


def contrast_rescale(image: np.ndarray) -> np.ndarray:
    """Affinely map the image onto [0, 1]; a constant image becomes all zeros."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi <= lo:
        return np.zeros_like(image)
    out = (image - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0)


def permute_pixels(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Shuffle spatial positions; channels at a position move together."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim < 2:
        return rng.permutation(image)
    C = image.shape[0] if image.ndim == 3 else 1
    flat = image.reshape(C, -1)
    perm = rng.permutation(flat.shape[1])
    return flat[:, perm].reshape(image.shape)


def generate_noise_batch(config: NoiseConfig, train_images: Optional[np.ndarray], n: int,
                         rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Draw ``n`` noise images of ``config.image_shape`` with values in [0, 1].

    The first ``floor(permuted_fraction * n)`` are pixel permutations of
    uniformly chosen training images, the rest uniform noise. Each image is
    smoothed with its own ``sigma ~ U(sigma_range)`` and then rescaled.
    Without ``rng`` the batch is determined by ``config.seed``.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    shape = config.image_shape
    n_perm = int(math.floor(config.permuted_fraction * n))
    if n_perm > 0 and (train_images is None or len(train_images) == 0):
        raise ValidationError("permuted noise requires training images")
    out = np.empty((n,) + shape)
    if n_perm:
        src = np.asarray(train_images, dtype=np.float64)
        src = src.reshape((len(src),) + shape)
        picks = rng.integers(0, len(src), size=n_perm)
        for i, j in enumerate(picks):
            out[i] = permute_pixels(src[j], rng)
    out[n_perm:] = rng.uniform(0.0, 1.0, size=(n - n_perm,) + shape)
    sigmas = rng.uniform(config.sigma_range[0], config.sigma_range[1], size=n)
    if len(shape) < 2:
        return out
    for i in range(n):
        out[i] = contrast_rescale(gaussian_lowpass(out[i], sigmas[i]))
    return out


@dataclass
class NoiseStream:
    """Stateful source of fresh noise batches for training."""

    config: NoiseConfig
    train_images: Optional[np.ndarray] = None
    rng: np.random.Generator = field(init=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.config.seed)

    def __call__(self, n: int) -> np.ndarray:
        return generate_noise_batch(self.config, self.train_images, n, self.rng)

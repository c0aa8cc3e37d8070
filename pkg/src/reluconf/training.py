"""Plain, CEDA and ACET training loops.

All three minimize the mean cross-entropy on labeled data. CEDA adds
``lam * mean(max log confidence)`` on ``ceil(lam * B)`` fresh noise samples per
step; ACET first moves each noise sample to the worst case in its eps-ball
with PGD and penalizes it there.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .attacks import PgdConfig, pgd_max_confidence
from .data import LabeledDataset
from .errors import NonFiniteError, TrainingError, ValidationError
from .metrics import mmc
from .models import ReluNetwork, confidence, cross_entropy, forward, max_log_confidence
from .noise import NoiseConfig, NoiseStream, generate_noise_batch
from .tensor import Tape

log = logging.getLogger(__name__)

MODES = ("plain", "ceda", "acet")


@dataclass
class TrainConfig:
    mode: str = "plain"
    lam: float = 1.0
    epochs: int = 100
    batch_size: int = 128
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_drop_epochs: Tuple[int, ...] = (50, 75, 90)
    lr_drop_factor: float = 10.0
    pgd: PgdConfig = field(default_factory=PgdConfig)
    noise: Optional[NoiseConfig] = None
    seed: int = 0
    random_crop_pad: int = 0
    mirror: bool = False
    log_noise_samples: int = 1000

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.lam < 0:
            raise ValidationError("lambda must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")
        if isinstance(self.pgd, dict):
            self.pgd = PgdConfig(**self.pgd)
        if isinstance(self.noise, dict):
            self.noise = NoiseConfig(**self.noise)
        self.lr_drop_epochs = tuple(int(e) for e in self.lr_drop_epochs)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown training options {sorted(unknown)}")
        return cls(**d)

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.lr_drop_epochs if epoch >= e)
        return self.lr / self.lr_drop_factor ** drops


@dataclass
class EpochRecord:
    epoch: int
    ce_loss: float
    conf_loss: float
    test_err: float
    noise_mmc: float


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)

    COLUMNS = ("epoch", "ce_loss", "conf_loss", "test_err", "noise_mmc")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.records:
            w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in self.COLUMNS[1:]])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


@dataclass
class MomentumState:
    velocity: List[np.ndarray]

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "MomentumState":
        return cls([np.zeros_like(p) for p in params])


def _decayed(params, grads, weight_decay, decay_mask):
    if not weight_decay:
        return list(grads)
    mask = [True] * len(params) if decay_mask is None else decay_mask
    return [g + weight_decay * p if d else g for p, g, d in zip(params, grads, mask)]


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0, decay_mask=None):
    """One bias-corrected Adam update; returns ``(new_params, state)``."""
    grads = _decayed(params, grads, weight_decay, decay_mask)
    t = state.t + 1
    m = [beta1 * mi + (1 - beta1) * g for mi, g in zip(state.m, grads)]
    v = [beta2 * vi + (1 - beta2) * g * g for vi, g in zip(state.v, grads)]
    c1, c2 = 1 - beta1 ** t, 1 - beta2 ** t
    new = [p - lr * (mi / c1) / (np.sqrt(vi / c2) + eps) for p, mi, vi in zip(params, m, v)]
    return new, AdamState(m, v, t)


def sgd_momentum_step(params, grads, state: MomentumState, lr: float, momentum: float = 0.9,
                      weight_decay: float = 0.0, decay_mask=None):
    """Heavy-ball SGD: ``v <- momentum * v + g``, ``p <- p - lr * v``."""
    grads = _decayed(params, grads, weight_decay, decay_mask)
    vel = [momentum * v + g for v, g in zip(state.velocity, grads)]
    return [p - lr * v for p, v in zip(params, vel)], MomentumState(vel)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


def mirror(images: np.ndarray) -> np.ndarray:
    """Flip NCHW images left-right."""
    return np.asarray(images)[..., ::-1].copy()


def augment(images: np.ndarray, random_crop_pad: int = 0, mirror_prob: float = 0.0,
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Zero-pad then randomly crop back to size; optionally mirror each image."""
    images = np.asarray(images, dtype=np.float64)
    if random_crop_pad < 0:
        raise ValidationError("random_crop_pad must be non-negative")
    if images.ndim != 4 or (random_crop_pad == 0 and mirror_prob == 0):
        return images
    rng = np.random.default_rng() if rng is None else rng
    B, C, H, W = images.shape
    out = images
    if random_crop_pad:
        p = random_crop_pad
        padded = np.pad(images, ((0, 0), (0, 0), (p, p), (p, p)))
        dy = rng.integers(0, 2 * p + 1, size=B)
        dx = rng.integers(0, 2 * p + 1, size=B)
        out = np.stack([padded[i, :, dy[i]:dy[i] + H, dx[i]:dx[i] + W] for i in range(B)])
    if mirror_prob:
        flip = rng.random(B) < mirror_prob
        out = out.copy()
        out[flip] = out[flip][..., ::-1]
    return out


def noise_count(batch_size: int, lam: float) -> int:
    if lam < 0:
        raise ValidationError("lambda must be non-negative")
    return int(math.ceil(lam * batch_size - 1e-12))


def make_mixed_batch(data_batch, noise_source: Callable[[int], np.ndarray], lam: float):
    """Return ``(inputs, labels, noise_inputs)`` with ``ceil(lam * B)`` noise samples."""
    x, y = data_batch
    n = noise_count(len(x), lam)
    noise = noise_source(n) if n else np.zeros((0,) + np.asarray(x).shape[1:])
    return x, y, noise


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _error_rate(net: ReluNetwork, ds: Optional[LabeledDataset]) -> float:
    if ds is None or len(ds) == 0:
        return float("nan")
    _, _, pred = confidence(net, ds.images)
    return float(np.mean(pred != ds.labels))


def train(net: ReluNetwork, train_set: LabeledDataset, test_set: Optional[LabeledDataset],
          cfg: TrainConfig, noise_source: Optional[Callable[[int], np.ndarray]] = None):
    """Train ``net`` in place; returns ``(net, TrainLog)``."""
    if train_set.num_classes != net.num_classes:
        raise ValidationError(f"dataset has {train_set.num_classes} classes, network {net.num_classes}")
    ss = np.random.SeedSequence(cfg.seed)
    shuffle_seed, noise_seed, heldout_seed, pgd_seed = ss.spawn(4)
    rng = np.random.default_rng(shuffle_seed)
    pgd_rng = np.random.default_rng(pgd_seed)
    noise_cfg = cfg.noise or NoiseConfig(image_shape=net.input_shape)
    if noise_source is None:
        stream_cfg = NoiseConfig(noise_cfg.image_shape, noise_cfg.permuted_fraction, noise_cfg.sigma_range,
                                 int(noise_seed.generate_state(1)[0]))
        noise_source = NoiseStream(stream_cfg, train_set.images)
    heldout = None
    if cfg.log_noise_samples:
        held_cfg = NoiseConfig(noise_cfg.image_shape, noise_cfg.permuted_fraction, noise_cfg.sigma_range,
                               int(heldout_seed.generate_state(1)[0]))
        heldout = generate_noise_batch(held_cfg, train_set.images, cfg.log_noise_samples)

    net.requires_grad_(True)
    params = net.parameters()
    tensors = [p for p, _ in params]
    decay_mask = [is_w for _, is_w in params]
    if cfg.optimizer == "adam":
        state = AdamState.zeros_like([p.data for p in tensors])
    else:
        state = MomentumState.zeros_like([p.data for p in tensors])
    lam = cfg.lam if cfg.mode != "plain" else 0.0
    log_ = TrainLog()
    n = len(train_set)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        ce_sum, conf_sum, steps = 0.0, 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = augment(train_set.images[idx], cfg.random_crop_pad, 0.5 if cfg.mirror else 0.0, rng)
            yb = train_set.labels[idx]
            xb, yb, zb = make_mixed_batch((xb, yb), noise_source, lam)
            if len(zb) and cfg.mode == "acet":
                pgd_cfg = PgdConfig(**{**cfg.pgd.__dict__, "seed": int(pgd_rng.integers(2 ** 63))})
                zb = pgd_max_confidence(net, zb, pgd_cfg)
            try:
                with Tape() as tape:
                    ce = T.mean(cross_entropy(forward(net, xb), yb))
                    total = ce
                    if len(zb):
                        conf = T.mean(max_log_confidence(forward(net, zb)))
                        total = T.add(ce, T.scale(conf, lam))
                grads = tape.backward(output=total)
            except NonFiniteError as exc:
                raise TrainingError(str(exc), epoch) from exc
            if not np.isfinite(total.data):
                raise TrainingError("loss is not finite", epoch)
            ce_sum += float(ce.data)
            conf_sum += float(conf.data) if len(zb) else 0.0
            steps += 1
            g = [grads.get(p, np.zeros_like(p.data)) for p in tensors]
            current = [p.data for p in tensors]
            if cfg.optimizer == "adam":
                new, state = adam_step(current, g, state, lr, weight_decay=cfg.weight_decay, decay_mask=decay_mask)
            else:
                new, state = sgd_momentum_step(current, g, state, lr, cfg.momentum, cfg.weight_decay, decay_mask)
            for p, v in zip(tensors, new):
                p.data = v
        noise_mmc = mmc(confidence(net, heldout)[1]) if heldout is not None else float("nan")
        rec = EpochRecord(epoch, ce_sum / max(steps, 1), conf_sum / max(steps, 1),
                          _error_rate(net, test_set), noise_mmc)
        log_.records.append(rec)
        log.info("epoch %d: ce %.4f conf %.4f test_err %.4f noise_mmc %.4f",
                 epoch, rec.ce_loss, rec.conf_loss, rec.test_err, rec.noise_mmc)
    return net, log_

"""ReLU feedforward and RBF classifiers, plus the two training losses."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import DimensionError, ValidationError
from .tensor import Tensor

ACTIVATIONS = ("relu", "leaky", "none")
DEFAULT_LEAKY_SLOPE = 0.01


def _check_activation(activation: str, slope: float) -> None:
    if activation not in ACTIVATIONS:
        raise ValidationError(f"unknown activation {activation!r}")
    if activation == "leaky" and not 0.0 < slope < 1.0:
        raise ValidationError(f"leaky slope must lie in (0, 1), got {slope}")


@dataclass
class Dense:
    W: Tensor
    b: Tensor
    activation: str = "relu"
    slope: float = 0.0
    kind = "dense"

    def __post_init__(self):
        self.W, self.b = T.as_tensor(self.W), T.as_tensor(self.b)
        if self.activation == "relu":
            self.slope = 0.0
        _check_activation(self.activation, self.slope)

    def out_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.W.shape[1]:
            raise DimensionError(f"dense layer expects ({self.W.shape[1]},), got {shape}")
        return (self.W.shape[0],)


@dataclass
class Conv:
    W: Tensor
    b: Tensor
    stride: int = 1
    padding: int = 0
    activation: str = "relu"
    slope: float = 0.0
    kind = "conv"

    def __post_init__(self):
        self.W, self.b = T.as_tensor(self.W), T.as_tensor(self.b)
        if self.activation == "relu":
            self.slope = 0.0
        _check_activation(self.activation, self.slope)

    def out_shape(self, shape):
        O, C, kh, kw = self.W.shape
        if len(shape) != 3 or shape[0] != C:
            raise DimensionError(f"conv layer expects {C} channels, got {shape}")
        H, Wd = shape[1] + 2 * self.padding, shape[2] + 2 * self.padding
        if kh > H or kw > Wd:
            raise DimensionError(f"conv kernel {kh}x{kw} does not fit {shape}")
        return (O, (H - kh) // self.stride + 1, (Wd - kw) // self.stride + 1)


@dataclass
class Pool:
    mode: str = "max"
    window: int = 2
    stride: Optional[int] = None

    @property
    def kind(self):
        return "maxpool" if self.mode == "max" else "avgpool"

    def out_shape(self, shape):
        s = self.window if self.stride is None else self.stride
        if len(shape) != 3 or self.window > min(shape[1:]):
            raise DimensionError(f"pool window {self.window} does not fit {shape}")
        return (shape[0], (shape[1] - self.window) // s + 1, (shape[2] - self.window) // s + 1)


@dataclass
class Flatten:
    kind = "flatten"

    def out_shape(self, shape):
        return (int(np.prod(shape)),)


Layer = Union[Dense, Conv, Pool, Flatten]


@dataclass
class ReluNetwork:
    """Layer stack computing logits ``f^(L+1)``; the last layer is affine."""

    layers: List[Layer]
    input_shape: Tuple[int, ...]
    num_classes: int = field(init=False)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if not self.layers:
            raise ValidationError("network needs at least one layer")
        last = self.layers[-1]
        if not isinstance(last, Dense) or last.activation != "none":
            raise ValidationError("output layer must be dense with activation 'none'")
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        self.num_classes = shape[0]
        if self.num_classes < 2:
            raise ValidationError("need K >= 2 classes")

    @property
    def is_dense(self) -> bool:
        return all(isinstance(l, (Dense, Flatten)) for l in self.layers)

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def parameters(self) -> List[Tuple[Tensor, bool]]:
        """(tensor, is_weight) pairs; biases are flagged False."""
        params = []
        for layer in self.layers:
            if isinstance(layer, (Dense, Conv)):
                params.append((layer.W, True))
                params.append((layer.b, False))
        return params

    def requires_grad_(self, flag: bool = True) -> "ReluNetwork":
        for p, _ in self.parameters():
            p.requires_grad = flag
        return self

    def frozen(self) -> "ReluNetwork":
        """Shallow copy whose parameters share data but never receive gradients."""
        clone = copy.copy(self)
        clone.layers = []
        for layer in self.layers:
            layer = copy.copy(layer)
            if isinstance(layer, (Dense, Conv)):
                layer.W, layer.b = Tensor(layer.W.data), Tensor(layer.b.data)
            clone.layers.append(layer)
        return clone

    def copy(self) -> "ReluNetwork":
        return copy.deepcopy(self)


def _activate(z: Tensor, layer) -> Tensor:
    if layer.activation == "none":
        return z
    return T.relu(z, layer.slope)


def _as_batch(net: ReluNetwork, x) -> Tensor:
    x = T.as_tensor(x)
    if x.shape[1:] != net.input_shape:
        if x.ndim == 2 and x.shape[1] == net.input_dim:
            return T.reshape(x, (x.shape[0],) + net.input_shape)
        raise DimensionError(f"input {x.shape} does not match network input {net.input_shape}")
    return x


def forward(net: ReluNetwork, x) -> Tensor:
    """Logits for a batch; ``x`` is ``[batch, *input_shape]`` or flattened ``[batch, d]``."""
    h = _as_batch(net, x)
    for layer in net.layers:
        if isinstance(layer, Dense):
            h = _activate(T.affine_layer(h, layer.W, layer.b), layer)
        elif isinstance(layer, Conv):
            h = _activate(T.conv2d(h, layer.W, layer.b, layer.stride, layer.padding), layer)
        elif isinstance(layer, Pool):
            pool = T.max_pool2d if layer.mode == "max" else T.avg_pool2d
            h = pool(h, layer.window, layer.stride)
        else:
            h = T.flatten(h)
    return h


def predict_logits(net: ReluNetwork, x, batch_size: int = 2048) -> np.ndarray:
    """Tape-free logits, evaluated in chunks."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    out = [forward(net, x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, net.num_classes))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_max_confidence(logits: np.ndarray) -> np.ndarray:
    """``max_k f_k - logsumexp(f)`` per row, never exponentiating large logits."""
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max(axis=-1)
    return -np.log(np.exp(logits - m[..., None]).sum(axis=-1))


def confidence(net: ReluNetwork, x) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(softmax probabilities, max confidence, predicted class) per sample."""
    probs = softmax_np(predict_logits(net, x))
    return probs, probs.max(axis=1), probs.argmax(axis=1)


def _check_labels(labels, K: int, n: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,) or not np.issubdtype(y.dtype, np.integer):
        raise ValidationError(f"labels must be {n} integers, got shape {y.shape} dtype {y.dtype}")
    if n and (y.min() < 0 or y.max() >= K):
        raise ValidationError(f"labels must lie in [0, {K})")
    return y


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-sample ``logsumexp(f) - f_y``."""
    logits = T.as_tensor(logits)
    y = _check_labels(labels, logits.shape[1], logits.shape[0])
    return T.neg(T.pick(T.log_softmax(logits), y))


def max_log_confidence(logits: Tensor) -> Tensor:
    """Per-sample ``max_l log softmax(f)_l``; lies in ``[-ln K, 0]``."""
    return T.max_(T.log_softmax(T.as_tensor(logits)))


def cross_entropy_loss(net: ReluNetwork, x, labels) -> Tensor:
    return T.mean(cross_entropy(forward(net, x), labels))


def max_log_confidence_loss(net: ReluNetwork, z) -> Tensor:
    return T.mean(max_log_confidence(forward(net, z)))


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def mlp(input_shape, hidden: Sequence[int], num_classes: int, rng: np.random.Generator,
        activation: str = "relu", slope: float = DEFAULT_LEAKY_SLOPE, bias_std: float = 0.0) -> ReluNetwork:
    """Fully connected network; a Flatten leads when the input is not a vector."""
    input_shape = (input_shape,) if np.isscalar(input_shape) else tuple(input_shape)
    layers: List[Layer] = [] if len(input_shape) == 1 else [Flatten()]
    width = int(np.prod(input_shape))
    for n in hidden:
        b = rng.normal(0.0, bias_std, size=n) if bias_std else np.zeros(n)
        layers.append(Dense(_he(rng, (n, width), width), b, activation, slope))
        width = n
    layers.append(Dense(_he(rng, (num_classes, width), width) * 0.5, np.zeros(num_classes), "none"))
    return ReluNetwork(layers, input_shape)


def lenet(rng: np.random.Generator, input_shape=(1, 28, 28), filters=(16, 32), hidden: int = 100,
          num_classes: int = 10, kernel: int = 5) -> ReluNetwork:
    """Two conv+maxpool blocks followed by two dense layers."""
    C, H, W = input_shape
    layers: List[Layer] = []
    for f in filters:
        fan = C * kernel * kernel
        layers += [Conv(_he(rng, (f, C, kernel, kernel), fan), np.zeros(f), padding=kernel // 2),
                   Pool("max", 2)]
        C, H, W = f, H // 2, W // 2
    width = C * H * W
    layers += [Flatten(),
               Dense(_he(rng, (hidden, width), width), np.zeros(hidden)),
               Dense(_he(rng, (num_classes, hidden), hidden) * 0.5, np.zeros(num_classes), "none")]
    return ReluNetwork(layers, input_shape)


# ---------------------------------------------------------------------------
# RBF network
# ---------------------------------------------------------------------------


@dataclass
class RbfNetwork:
    """``f_k(x) = sum_l coefficients[k, l] * exp(-gamma * ||x - centers[l]||^2)``."""

    centers: np.ndarray
    coefficients: Tensor
    gamma: float

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        self.coefficients = T.as_tensor(self.coefficients)
        if self.centers.ndim != 2 or self.centers.shape[0] < 1:
            raise ValidationError("centers must be a non-empty [N x d] array")
        if not np.isfinite(self.centers).all():
            raise ValidationError("centers must be finite")
        if not self.gamma > 0:
            raise ValidationError(f"gamma must be positive, got {self.gamma}")
        if self.coefficients.ndim != 2 or self.coefficients.shape[1] != self.centers.shape[0]:
            raise DimensionError(
                f"coefficients {self.coefficients.shape} do not match {self.centers.shape[0]} centers")
        if self.coefficients.shape[0] < 2:
            raise ValidationError("need K >= 2 classes")

    @property
    def num_classes(self) -> int:
        return self.coefficients.shape[0]

    def sq_distances(self, x) -> np.ndarray:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.centers.shape[1]:
            raise DimensionError(f"input {x.shape} does not match centers {self.centers.shape}")
        # explicit differences: the expanded |x|^2 - 2<x,c> + |c|^2 form cancels badly far away
        diff = x[:, None, :] - self.centers[None, :, :]
        return np.einsum("bnd,bnd->bn", diff, diff)

    def features(self, x) -> np.ndarray:
        return np.exp(-self.gamma * self.sq_distances(x))


def rbf_forward(net: RbfNetwork, x) -> Tensor:
    """Logits of the RBF network; differentiable in the coefficients."""
    return T.affine_layer(Tensor(net.features(x)), net.coefficients)

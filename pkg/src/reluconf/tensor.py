"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Every primitive checks its operand shapes, computes its output with numpy and,
when a :class:`Tape` is recording and at least one operand requires a
gradient, appends a node holding the closure for its vector-Jacobian product.

>>> x = Tensor([1.0, 2.0], requires_grad=True)
>>> with Tape() as tape:
...     y = sum_(mul(x, x))
>>> grads = tape.backward()
>>> grads[x].tolist()
[2.0, 4.0]
"""

from __future__ import annotations

import threading
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NonFiniteError, TapeStateError, ValidationError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "as_tensor",
    "affine_layer",
    "relu",
    "softmax",
    "log_softmax",
    "logsumexp",
    "pick",
    "max_",
    "sum_",
    "mean",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "exp",
    "reshape",
    "flatten",
    "conv2d",
    "max_pool2d",
    "avg_pool2d",
]

_local = threading.local()


def _tape_stack() -> List["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array plus autodiff bookkeeping.

    ``data`` is the row-major value; ``grad`` is filled on leaves by
    :meth:`Tape.backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class _Node:
    __slots__ = ("op", "out", "inputs", "forward", "vjp")

    def __init__(self, op, out, inputs, forward, vjp):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.forward = forward
        self.vjp = vjp


class Tape:
    """Ordered record of one forward pass.

    A tape is single-use: after :meth:`backward` it refuses further work.
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise TapeStateError("tape already consumed; build a fresh one")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    @property
    def output(self) -> Tensor:
        if not self.nodes:
            raise TapeStateError("backward before forward: tape is empty")
        return self.nodes[-1].out

    def _record(self, node: _Node) -> None:
        if self._consumed:
            raise TapeStateError("tape already consumed")
        self.nodes.append(node)

    def replay(self) -> List[np.ndarray]:
        """Recompute every recorded node from its saved inputs."""
        return [node.forward(*(t.data for t in node.inputs)) for node in self.nodes]

    def backward(self, seed=None, output: Optional[Tensor] = None) -> Dict[Tensor, np.ndarray]:
        """Propagate ``seed`` from ``output`` (default: last node) to all leaves.

        Returns a mapping leaf -> gradient and also stores each gradient in
        ``leaf.grad``. Leaves are recorded operands that require a gradient
        but are not produced by any node on this tape.
        """
        if self._consumed:
            raise TapeStateError("tape already consumed; build a fresh one")
        out = self.output if output is None else output
        if seed is None:
            seed_arr = np.ones_like(out.data)
        else:
            seed_arr = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
            if seed_arr.shape != out.shape:
                raise DimensionError(f"seed shape {seed_arr.shape} != output shape {out.shape}")
        self._consumed = True

        produced = {id(node.out) for node in self.nodes}
        grads: Dict[int, np.ndarray] = {id(out): seed_arr}
        leaves: Dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key not in produced:
                    leaves[key] = inp
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        for node in self.nodes:
            for inp in node.inputs:
                if inp.requires_grad and id(inp) not in produced:
                    leaves.setdefault(id(inp), inp)
        result: Dict[Tensor, np.ndarray] = {}
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g
            result[leaf] = g
        return result


def backward(tape: Tape, seed=None) -> Dict[Tensor, np.ndarray]:
    return tape.backward(seed)


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], forward: Callable, vjp: Callable) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=track)
    if track:
        tape._record(_Node(op, result, tuple(inputs), forward, vjp))
    return result


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.data.ndim and b.data.ndim:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    return g if g.shape == shape else np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    fwd = np.add
    return _emit("add", fwd(a.data, b.data), (a, b), fwd,
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    fwd = np.subtract
    return _emit("sub", fwd(a.data, b.data), (a, b), fwd,
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    fwd = np.multiply
    return _emit("mul", fwd(a.data, b.data), (a, b), fwd,
                 lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)

    def fwd(v):
        return v * c

    return _emit("scale", fwd(x.data), (x,), fwd, lambda g: (g * c,))


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _emit("exp", out, (x,), np.exp, lambda g: (g * out,))


def sum_(x: Tensor, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)

    def fwd(v):
        return np.sum(v, axis=axis)

    def vjp(g):
        if axis is None:
            return (np.full(x.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _emit("sum", np.asarray(fwd(x.data)), (x,), fwd, vjp)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    if n == 0:
        raise ValidationError("mean of an empty tensor")
    return scale(sum_(x, axis), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    in_shape = x.shape
    return _emit("reshape", out, (x,), lambda v: v.reshape(shape), lambda g: (g.reshape(in_shape),))


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1) if x.ndim > 1 else (x.shape[0], 1))


# ---------------------------------------------------------------------------
# network primitives
# ---------------------------------------------------------------------------


def affine_layer(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``out[i, j] = sum_k W[j, k] * x[i, k] + b[j]``."""
    x, W = as_tensor(x), as_tensor(W)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1]:
        raise DimensionError(f"affine_layer: x {x.shape} incompatible with W {W.shape}")
    if b is None:
        def fwd(xv, Wv):
            return xv @ Wv.T

        return _emit("affine", fwd(x.data, W.data), (x, W), fwd,
                     lambda g: (g @ W.data, g.T @ x.data))
    b = as_tensor(b)
    if b.shape != (W.shape[0],):
        raise DimensionError(f"affine_layer: bias {b.shape} incompatible with W {W.shape}")

    def fwd(xv, Wv, bv):
        return xv @ Wv.T + bv

    return _emit("affine", fwd(x.data, W.data, b.data), (x, W, b), fwd,
                 lambda g: (g @ W.data, g.T @ x.data, g.sum(axis=0)))


def relu(x: Tensor, negative_slope: float = 0.0) -> Tensor:
    """``max(0, t) + negative_slope * min(0, t)``; the derivative at 0 is the slope."""
    x = as_tensor(x)
    if not 0.0 <= negative_slope < 1.0:
        raise ValidationError(f"negative_slope must lie in [0, 1), got {negative_slope}")
    slope = float(negative_slope)

    def fwd(v):
        return np.where(v > 0, v, slope * v) if slope else np.maximum(v, 0.0)

    mask = x.data > 0
    return _emit("relu", fwd(x.data), (x,), fwd,
                 lambda g: (np.where(mask, g, slope * g),))


def _lse(v: np.ndarray) -> np.ndarray:
    m = v.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(v - m).sum(axis=-1, keepdims=True)))[..., 0]


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_logits(op: str, x: Tensor) -> None:
    if x.ndim != 2 or x.shape[1] < 2:
        raise DimensionError(f"{op} expects [batch x K] logits with K >= 2, got {x.shape}")


def logsumexp(x: Tensor) -> Tensor:
    """Row-wise log-sum-exp of a [batch x K] tensor, shifted by the row max."""
    x = as_tensor(x)
    _check_logits("logsumexp", x)
    p = _softmax(x.data)
    return _emit("logsumexp", _lse(x.data), (x,), _lse, lambda g: (g[:, None] * p,))


def softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_logits("softmax", x)
    s = _softmax(x.data)
    return _emit("softmax", s, (x,), _softmax,
                 lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))


def _log_softmax(v: np.ndarray) -> np.ndarray:
    return v - _lse(v)[:, None]


def log_softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_logits("log_softmax", x)
    p = _softmax(x.data)
    return _emit("log_softmax", _log_softmax(x.data), (x,), _log_softmax,
                 lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def pick(x: Tensor, index) -> Tensor:
    """``out[i] = x[i, index[i]]``."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise DimensionError(f"pick: x {x.shape} incompatible with index {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ValidationError(f"pick: index out of range [0, {x.shape[1]})")
    rows = np.arange(x.shape[0])

    def fwd(v):
        return v[rows, idx]

    def vjp(g):
        out = np.zeros(x.shape)
        out[rows, idx] = g
        return (out,)

    return _emit("pick", fwd(x.data), (x,), fwd, vjp)


def max_(x: Tensor) -> Tensor:
    """Row-wise max; the gradient flows to the first maximal entry only."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"max_ expects a 2-d tensor, got {x.shape}")
    arg = np.argmax(x.data, axis=1)
    rows = np.arange(x.shape[0])

    def vjp(g):
        out = np.zeros(x.shape)
        out[rows, arg] = g
        return (out,)

    return _emit("max", x.data[rows, arg], (x,), lambda v: v.max(axis=1), vjp)


# ---------------------------------------------------------------------------
# convolution and pooling (NCHW)
# ---------------------------------------------------------------------------


def _windows(v: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = sliding_window_view(v, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _out_size(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


def conv2d(x: Tensor, W: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x [B,C,H,W]`` with ``W [O,C,kh,kw]`` and zero padding."""
    x, W = as_tensor(x), as_tensor(W)
    if x.ndim != 4 or W.ndim != 4 or x.shape[1] != W.shape[1]:
        raise DimensionError(f"conv2d: x {x.shape} incompatible with kernel {W.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride {stride} / padding {padding}")
    B, C, H, Wd = x.shape
    O, _, kh, kw = W.shape
    if kh > H + 2 * padding or kw > Wd + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{Wd}+{padding}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (O,):
            raise DimensionError(f"conv2d: bias {b.shape} incompatible with {O} filters")
    Ho, Wo = _out_size(H + 2 * padding, kh, stride), _out_size(Wd + 2 * padding, kw, stride)

    def cols_of(xv):
        xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv
        win = _windows(xp, kh, kw, stride)  # B,C,Ho,Wo,kh,kw
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)

    def fwd(xv, Wv, bv=None):
        out = cols_of(xv) @ Wv.reshape(O, -1).T
        if bv is not None:
            out = out + bv
        return out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    cols = cols_of(x.data)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gW = (g2.T @ cols).reshape(W.shape)
        gcols = (g2 @ W.data.reshape(O, -1)).reshape(B, Ho, Wo, C, kh, kw)
        gxp = np.zeros((B, C, H + 2 * padding, Wd + 2 * padding))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + H, padding:padding + Wd]
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    inputs = (x, W) if b is None else (x, W, b)
    out = fwd(x.data, W.data, None if b is None else b.data)
    return _emit("conv2d", out, inputs, fwd, vjp)


def _pool_geometry(op: str, x: Tensor, window: int, stride: Optional[int]):
    if x.ndim != 4:
        raise DimensionError(f"{op} expects NCHW input, got {x.shape}")
    stride = window if stride is None else stride
    if window < 1 or stride < 1 or window > x.shape[2] or window > x.shape[3]:
        raise DimensionError(f"{op}: window {window} / stride {stride} incompatible with {x.shape}")
    B, C, H, Wd = x.shape
    return stride, _out_size(H, window, stride), _out_size(Wd, window, stride)


def max_pool2d(x: Tensor, window: int = 2, stride: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    stride, Ho, Wo = _pool_geometry("max_pool2d", x, window, stride)
    B, C = x.shape[:2]

    def flat_windows(v):
        return _windows(v, window, window, stride).reshape(B, C, Ho, Wo, window * window)

    win = flat_windows(x.data)
    arg = win.argmax(axis=-1)

    def fwd(v):
        return flat_windows(v).max(axis=-1)

    def vjp(g):
        gx = np.zeros(x.shape)
        for p in range(window * window):
            i, j = divmod(p, window)
            gx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += np.where(arg == p, g, 0.0)
        return (gx,)

    return _emit("max_pool2d", np.take_along_axis(win, arg[..., None], -1)[..., 0], (x,), fwd, vjp)


def avg_pool2d(x: Tensor, window: int = 2, stride: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    stride, Ho, Wo = _pool_geometry("avg_pool2d", x, window, stride)

    def fwd(v):
        return _windows(v, window, window, stride).mean(axis=(-2, -1))

    def vjp(g):
        gx = np.zeros(x.shape)
        share = g / (window * window)
        for i in range(window):
            for j in range(window):
                gx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += share
        return (gx,)

    return _emit("avg_pool2d", fwd(x.data), (x,), fwd, vjp)

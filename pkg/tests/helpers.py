"""Shared oracles and builders for the test suite."""

import numpy as np

from reluconf import tensor as T
from reluconf.geometry import preactivations
from reluconf.models import Dense, ReluNetwork, cross_entropy, forward
from reluconf.tensor import Tape, Tensor

# acceptance criterion id -> (passed, detail)
ACCEPTANCE = {}


def random_dense_net(rng, d_in, widths, K, activation="relu", slope=0.01, bias_scale=0.5):
    """Dense net with random Gaussian weights and non-trivial biases."""
    layers = []
    w = d_in
    for n in widths:
        layers.append(Dense(rng.normal(0, 1 / np.sqrt(w), (n, w)), rng.normal(0, bias_scale, n),
                            activation, slope))
        w = n
    layers.append(Dense(rng.normal(0, 1 / np.sqrt(w), (K, w)), rng.normal(0, bias_scale, K), "none"))
    return ReluNetwork(layers, (d_in,))


def numeric_grads(fn, arrays, h=1e-6):
    """Central differences of the scalar ``fn(*arrays)`` w.r.t. every array."""
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[k][idx] += h
            minus[k][idx] -= h
            g[idx] = (fn(*plus) - fn(*minus)) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8))


def gradcheck(op, arrays, rng, h=1e-6):
    """Max relative error between tape gradients and central differences.

    The op output is contracted with a fixed random weight so every output
    entry contributes to the scalar being differentiated.
    """
    out_shape = np.shape(op(*[Tensor(a) for a in arrays]).data)
    w = rng.normal(size=out_shape)

    def scalar(*vals):
        return float(np.sum(op(*[Tensor(v) for v in vals]).data * w))

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = op(*leaves)
        T.sum_(T.mul(out, Tensor(w)))
    tape.backward()
    num = numeric_grads(scalar, [a.copy() for a in arrays], h)
    return max(rel_err(l.grad, n) for l, n in zip(leaves, num))


def network_gradcheck(rng, n_cases, margin=1e-3):
    """Worst relative error of input and parameter gradients of the mean CE
    of random 3-layer nets; cases with a pre-activation near a kink are redrawn."""
    worst, cases = 0.0, 0
    while cases < n_cases:
        net = random_dense_net(rng, 4, [6, 5], 3)
        x = rng.normal(size=(3, 4))
        y = rng.integers(0, 3, size=3)
        if min(np.abs(z).min() for z in preactivations(net, x)) < margin:
            continue
        params = [p.data.copy() for p, _ in net.parameters()]

        def loss(xv, *ps):
            for (p, _), v in zip(net.parameters(), ps):
                p.data = v
            return float(T.mean(cross_entropy(forward(net, xv), y)).data)

        xt = Tensor(x.copy(), requires_grad=True)
        for (p, _), v in zip(net.parameters(), params):
            p.data = v.copy()
        net.requires_grad_(True)
        with Tape() as tape:
            T.mean(cross_entropy(forward(net, xt), y))
        grads = tape.backward()
        analytic = [xt.grad] + [grads[p] for p, _ in net.parameters()]
        num = numeric_grads(loss, [x.copy()] + [v.copy() for v in params])
        worst = max(worst, max(rel_err(a, n) for a, n in zip(analytic, num)))
        cases += 1
    return worst


def matmul_loops(A, B):
    n, k = A.shape
    m = B.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += A[i, t] * B[t, j]
            out[i, j] = s
    return out


def conv2d_loops(x, W, b, stride=1, padding=0):
    B, C, H, Wd = x.shape
    F, _, kh, kw = W.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (Wd + 2 * padding - kw) // stride + 1
    out = np.zeros((B, F, Ho, Wo))
    for n in range(B):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, f, i, j] = np.sum(patch * W[f]) + (b[f] if b is not None else 0.0)
    return out


def softmax_unshifted(z):
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)

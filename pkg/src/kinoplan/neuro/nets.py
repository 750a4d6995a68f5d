"""From-scratch network building blocks: affine, 3x3 conv, dropout, Adam.

Everything is float64 numpy.  Forward passes cache whatever backward needs;
backward fills per-layer gradients aligned with ``params``.  No autograd; the
gradient-check utilities in train.py keep the hand-written backward honest.
"""

import math

import numpy as np

from ..errors import ContractViolation


def he_init(rng, fan_in: int, shape):
    """He-normal weights for ReLU layers."""
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, y):
    """dy through ReLU given the forward *output* y (y > 0 iff input > 0)."""
    return np.where(y > 0.0, dy, 0.0)


def dropout_mask(rng, shape, p: float):
    """Inverted-dropout multiplier: 0 with probability p, else 1/(1-p).

    Scaling at mask time keeps the deterministic (no-mask) pass equal to the
    expectation over masks, so inference without dropout needs no rescaling.
    """
    return (rng.random(shape) >= p) / (1.0 - p)


class Affine:
    """y = x W + b."""

    def __init__(self, rng, n_in: int, n_out: int):
        if n_in < 1 or n_out < 1:
            raise ContractViolation("layer widths must be positive")
        self.W = he_init(rng, n_in, (n_in, n_out))
        self.b = np.zeros(n_out)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self._x = None

    def forward(self, x):
        if x.shape[-1] != self.W.shape[0]:
            raise ContractViolation(
                f"affine expects {self.W.shape[0]} inputs, got {x.shape[-1]}")
        self._x = x
        return x @ self.W + self.b

    def backward(self, dy):
        self.dW = self._x.T @ dy
        self.db = dy.sum(axis=0)
        return dy @ self.W.T

    @property
    def params(self):
        return [self.W, self.b]

    @property
    def grads(self):
        return [self.dW, self.db]


class Conv2d:
    """k x k convolution with stride and zero padding, via im2col.

    Weights are stored as (c_out, c_in*k*k) so forward is one matmul against
    the column matrix.  Defaults match the encoder stack: 3x3, stride 2,
    pad 1 (halves the spatial size).
    """

    def __init__(self, rng, c_in: int, c_out: int, kernel: int = 3,
                 stride: int = 2, pad: int = 1):
        if c_in < 1 or c_out < 1:
            raise ContractViolation("channel counts must be positive")
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        fan_in = c_in * kernel * kernel
        self.W = he_init(rng, fan_in, (c_out, fan_in))
        self.b = np.zeros(c_out)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self._cols = None
        self._x_shape = None

    def out_size(self, h: int, w: int):
        k, s, p = self.kernel, self.stride, self.pad
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x):
        n, c, h, w = x.shape
        if c != self.c_in:
            raise ContractViolation(
                f"conv expects {self.c_in} channels, got {c}")
        k, s, p = self.kernel, self.stride, self.pad
        oh, ow = self.out_size(h, w)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = np.empty((n, c, k, k, oh, ow))
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = xp[:, :, i:i + s * oh:s, j:j + s * ow:s]
        cols = cols.reshape(n, c * k * k, oh * ow)
        self._cols = cols
        self._x_shape = (n, c, h, w)
        y = np.matmul(self.W, cols) + self.b[:, None]
        return y.reshape(n, self.c_out, oh, ow)

    def backward(self, dy):
        n, c, h, w = self._x_shape
        k, s, p = self.kernel, self.stride, self.pad
        oh, ow = self.out_size(h, w)
        dy_flat = dy.reshape(n, self.c_out, oh * ow)
        self.dW = np.einsum("ncl,nkl->ck", dy_flat, self._cols)
        self.db = dy_flat.sum(axis=(0, 2))
        dcols = np.matmul(self.W.T, dy_flat)
        dcols = dcols.reshape(n, c, k, k, oh, ow)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, i, j]
        return dxp[:, :, p:p + h, p:p + w]

    @property
    def params(self):
        return [self.W, self.b]

    @property
    def grads(self):
        return [self.dW, self.db]


class Mlp:
    """ReLU MLP with inverted dropout on every hidden layer.

    forward(x, rng): passing a Generator draws fresh dropout masks (the
    stochastic mode); rng=None runs the deterministic network.
    """

    def __init__(self, rng, n_in: int, n_out: int,
                 hidden=(512, 512, 512), p_drop: float = 0.2):
        if not 0.0 <= p_drop < 1.0:
            raise ContractViolation("dropout probability must be in [0, 1)")
        if len(hidden) < 1:
            raise ContractViolation("at least one hidden layer required")
        dims = [n_in, *hidden, n_out]
        self.layers = [Affine(rng, dims[i], dims[i + 1])
                       for i in range(len(dims) - 1)]
        self.p_drop = float(p_drop)
        self._caches = None

    @property
    def n_in(self):
        return self.layers[0].W.shape[0]

    @property
    def n_out(self):
        return self.layers[-1].W.shape[1]

    def forward(self, x, rng=None):
        caches = []
        h = x
        for layer in self.layers[:-1]:
            a = relu(layer.forward(h))
            if rng is not None and self.p_drop > 0.0:
                mask = dropout_mask(rng, a.shape, self.p_drop)
                h = a * mask
            else:
                mask = None
                h = a
            caches.append((a, mask))
        self._caches = caches
        return self.layers[-1].forward(h)

    def backward(self, dy):
        dx = self.layers[-1].backward(dy)
        for layer, (a, mask) in zip(reversed(self.layers[:-1]),
                                    reversed(self._caches)):
            if mask is not None:
                dx = dx * mask
            dx = relu_backward(dx, a)
            dx = layer.backward(dx)
        return dx

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    @property
    def grads(self):
        return [g for layer in self.layers for g in layer.grads]


class Adam:
    """Adam with bias correction; updates the given arrays in place."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ContractViolation("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ContractViolation("gradient list does not match parameters")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

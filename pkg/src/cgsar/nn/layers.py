"""Differentiable layers over NHWC arrays.

Every layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients in ``backward``.  Kernels are stored as
``(out, in, kh, kw)``; activations flow as ``(batch, height, width,
channels)`` so convolutions reduce to one matrix product over the channel
axis.
"""

from __future__ import annotations

import numpy as np


class Param:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self) -> None:
        self.grad[...] = 0

    @property
    def shape(self):
        return self.value.shape


class Layer:
    def params(self) -> list[Param]:
        return []

    def forward(self, x):
        raise NotImplementedError

    def backward(self, gy):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


def glorot_uniform(shape, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Uniform on [-a, a] with a = sqrt(6 / (fan_in + fan_out)).

    For a kernel ``(out, in, kh, kw)`` the fans are ``in*kh*kw`` and
    ``out*kh*kw``; for a matrix ``(out, in)`` they are ``in`` and ``out``.
    """
    shape = tuple(shape)
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_out, fan_in = shape[0] * receptive, shape[1] * receptive
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


class Conv2d(Layer):
    """Stride-1 cross-correlation with zero 'same' padding, k in {1, 3}."""

    def __init__(self, name: str, in_ch: int, out_ch: int, k: int, rng: np.random.Generator, dtype=np.float32):
        if k not in (1, 3):
            raise ValueError("kernel size must be 1 or 3")
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        self.weight = Param(f"{name}.weight", glorot_uniform((out_ch, in_ch, k, k), rng, dtype))
        self.bias = Param(f"{name}.bias", np.zeros(out_ch, dtype=dtype))
        self._cols = None

    def params(self):
        return [self.weight, self.bias]

    def _matrix(self) -> np.ndarray:
        # rows ordered (dy, dx, in) to match the column layout
        return self.weight.value.transpose(2, 3, 1, 0).reshape(-1, self.out_ch)

    def _im2col(self, x: np.ndarray) -> np.ndarray:
        if self.k == 1:
            return x
        n, h, w, c = x.shape
        xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
        xp[:, 1:-1, 1:-1] = x
        cols = np.empty((n, h, w, 9 * c), dtype=x.dtype)
        for dy in range(3):
            for dx in range(3):
                j = (dy * 3 + dx) * c
                cols[..., j : j + c] = xp[:, dy : dy + h, dx : dx + w]
        return cols

    def forward(self, x):
        if x.ndim != 4 or x.shape[-1] != self.in_ch:
            raise ValueError(f"expected (N, H, W, {self.in_ch}) input, got {x.shape}")
        return self.forward_cols(self._im2col(x))

    def forward_cols(self, cols):
        """Forward from a precomputed column buffer (shared between convs on one input)."""
        self._cols = cols
        flat = cols.reshape(-1, cols.shape[-1])
        return (flat @ self._matrix() + self.bias.value).reshape(*cols.shape[:-1], self.out_ch)

    def backward(self, gy, input_grad: bool = True):
        g2 = self.backward_params(gy)
        if not input_grad:
            return None
        return self.grad_input(g2, self._matrix(), gy.shape[:-1])

    def backward_params(self, gy):
        """Accumulate weight and bias gradients; return ``gy`` flattened to (pixels, out)."""
        g2 = gy.reshape(-1, self.out_ch)
        gw = self._cols.reshape(-1, self._cols.shape[-1]).T @ g2
        self.weight.grad += gw.reshape(self.k, self.k, self.in_ch, self.out_ch).transpose(3, 2, 0, 1)
        self.bias.grad += g2.sum(axis=0)
        return g2

    def grad_input(self, g2, matrix, nhw):
        """Input gradient from flattened output gradients, one matmul per kernel tap.

        ``matrix`` may stack several convolutions on the same input side by
        side, with ``g2`` holding their output gradients in matching order.
        """
        c = self.in_ch
        if self.k == 1:
            return (g2 @ matrix.T).reshape(*nhw, c)
        n, h, w = nhw
        gxp = np.zeros((n, h + 2, w + 2, c), dtype=g2.dtype)
        for dy in range(3):
            for dx in range(3):
                j = (dy * 3 + dx) * c
                gxp[:, dy : dy + h, dx : dx + w] += (g2 @ matrix[j : j + c].T).reshape(n, h, w, c)
        return gxp[:, 1:-1, 1:-1]


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, gy):
        return np.where(self._mask, gy, 0).astype(gy.dtype, copy=False)


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x.dtype, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid(Layer):
    def forward(self, x):
        self._y = sigmoid(x)
        return self._y

    def backward(self, gy):
        return gy * self._y * (1 - self._y)


class MaxPool2x2(Layer):
    """2x2 pooling with stride 2; odd sizes are padded with -inf on the far side.

    Gradients go to the first maximum of each window in row-major order.
    """

    def forward(self, x):
        n, h, w, c = x.shape
        self._in_shape = x.shape
        hp, wp = h + h % 2, w + w % 2
        if (hp, wp) != (h, w):
            xp = np.full((n, hp, wp, c), -np.inf, dtype=x.dtype)
            xp[:, :h, :w] = x
            x = xp
        win = x.reshape(n, hp // 2, 2, wp // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, hp // 2, wp // 2, c, 4)
        self._arg = win.argmax(axis=-1)
        return np.take_along_axis(win, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, gy):
        n, h, w, c = self._in_shape
        ho, wo = gy.shape[1:3]
        g = np.zeros((n, ho, wo, c, 4), dtype=gy.dtype)
        np.put_along_axis(g, self._arg[..., None], gy[..., None], axis=-1)
        g = g.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * ho, 2 * wo, c)
        return g[:, :h, :w]


def bilinear_matrix(n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) interpolation weights, half-pixel centres, edge-clamped."""
    if n_out < n_in:
        raise ValueError("target size must not be smaller than the source")
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


class UpsampleBilinear(Layer):
    def __init__(self, target_hw: tuple[int, int]):
        self.target_hw = tuple(target_hw)
        self._mats = {}

    def _matrices(self, h, w, dtype):
        key = (h, w, np.dtype(dtype).str)
        if key not in self._mats:
            self._mats[key] = (
                bilinear_matrix(self.target_hw[0], h, dtype),
                bilinear_matrix(self.target_hw[1], w, dtype),
            )
        return self._mats[key]

    def forward(self, x):
        n, h, w, c = x.shape
        mh, mw = self._matrices(h, w, x.dtype)
        self._in_hw = (h, w)
        t = np.einsum("ph,nhwc->npwc", mh, x, optimize=True)
        return np.einsum("qw,npwc->npqc", mw, t, optimize=True)

    def backward(self, gy):
        h, w = self._in_hw
        mh, mw = self._matrices(h, w, gy.dtype)
        t = np.einsum("qw,npqc->npwc", mw, gy, optimize=True)
        return np.einsum("ph,npwc->nhwc", mh, t, optimize=True)


BCE_EPS = 1e-7


def bce_loss(p, y) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy of probabilities and its gradient w.r.t. ``p``."""
    p = np.asarray(p)
    y = np.asarray(y)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {y.shape}")
    pc = np.clip(p, BCE_EPS, 1 - BCE_EPS)
    loss = -np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc))
    inside = (p > BCE_EPS) & (p < 1 - BCE_EPS)
    grad = np.where(inside, (pc - y) / (pc * (1 - pc)), 0.0) / p.size
    return float(loss), grad.astype(p.dtype, copy=False)


def bce_with_logits(z, y) -> tuple[float, np.ndarray]:
    """Clamped BCE of ``sigmoid(z)`` and the unclamped gradient ``(p - y) / N`` w.r.t. ``z``."""
    z = np.asarray(z)
    if z.shape != np.shape(y):
        raise ValueError(f"shape mismatch {z.shape} vs {np.shape(y)}")
    p = sigmoid(z)
    pc = np.clip(p.astype(np.float64), BCE_EPS, 1 - BCE_EPS)
    loss = -np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc))
    return float(loss), ((p - y) / z.size).astype(z.dtype, copy=False)

"""Layer kinds of a TP stack: dense, dense-recurrent and conv+pool.

A layer owns its parameters and knows how to turn presynaptic activity into
an input current and how to contract a per-neuron learning signal with that
same presynaptic activity into a weight gradient. Neuron arrays are laid out
``[batch, units]`` for dense layers and ``[batch, channels, height, width]``
for conv layers; traces and membranes live on the pre-pool neurons.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError
from .neuron import LifParams

WN_EPS = 1e-12


def weight_normalize(W: np.ndarray, gain: np.ndarray | float, axis=0) -> np.ndarray:
    """Rescale every fan-in vector of ``W`` to norm ``gain``.

    For a dense ``[pre, post]`` matrix the fan-in of unit j is column j
    (``axis=0``); pass the reduction axes explicitly for other layouts.
    """
    gain = np.asarray(gain, dtype=W.dtype)
    if np.any(gain <= 0):
        raise ConfigError("weight-normalization gain must be positive")
    norm = np.sqrt(np.sum(W * W, axis=axis, keepdims=True)) + WN_EPS
    return (W / norm * _expand_gain(gain, W, axis)).astype(W.dtype, copy=False)


def _expand_gain(gain, W, axis):
    if gain.ndim == 0:
        return gain
    shape = [1] * W.ndim
    keep = [d for d in range(W.ndim) if d not in np.atleast_1d(axis) % W.ndim]
    for d in keep:
        shape[d] = W.shape[d]
    return gain.reshape(shape)


def weight_normalize_backward(W: np.ndarray, gain, d_eff: np.ndarray, axis=0) -> np.ndarray:
    """Chain a gradient w.r.t. normalized weights back to the raw weights (gain held fixed)."""
    gain = np.asarray(gain, dtype=W.dtype)
    norm = np.sqrt(np.sum(W * W, axis=axis, keepdims=True)) + WN_EPS
    w_hat = W / norm
    radial = np.sum(w_hat * d_eff, axis=axis, keepdims=True)
    return _expand_gain(gain, W, axis) / norm * (d_eff - w_hat * radial)


def max_pool(x: np.ndarray, size: int) -> np.ndarray:
    if size == 1:
        return x
    b, c, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"spatial dims {(h, w)} not divisible by pool size {size}")
    return x.reshape(b, c, h // size, size, w // size, size).max(axis=(3, 5))


def pool_by_reference(x: np.ndarray, ref: np.ndarray, size: int) -> np.ndarray:
    """Pool ``x`` by picking, in each window, the element where ``ref`` is maximal."""
    if size == 1:
        return x
    b, c, h, w = x.shape

    def windows(a):
        a = a.reshape(b, c, h // size, size, w // size, size).transpose(0, 1, 2, 4, 3, 5)
        return a.reshape(b, c, h // size, w // size, size * size)

    idx = np.argmax(windows(ref), axis=-1)[..., None]
    return np.take_along_axis(windows(x), idx, axis=-1)[..., 0]


@dataclass
class DenseLayer:
    """Fully connected layer ``I = x @ W`` with optional recurrence ``s_prev @ R``.

    ``recurrent`` is ``None``, ``"full"`` or ``"diagonal"`` (R restricted to
    its diagonal, i.e. a self-connection per neuron).
    """

    W: np.ndarray
    params: LifParams
    beta: float
    R: np.ndarray | None = None
    recurrent: str | None = None
    weight_norm: bool = False
    gain: np.ndarray | None = None
    kind: str = field(default="dense", init=False)

    def __post_init__(self):
        if self.recurrent not in (None, "full", "diagonal"):
            raise ConfigError(f"unknown recurrent mode {self.recurrent!r}")
        if (self.R is None) != (self.recurrent is None):
            raise ConfigError("R must be given exactly when the layer is recurrent")
        if self.recurrent:
            self.kind = "dense-recurrent"
        if self.weight_norm and self.gain is None:
            self.gain = np.ones(self.W.shape[1], dtype=self.W.dtype)

    @property
    def in_shape(self) -> tuple[int, ...]:
        return (self.W.shape[0],)

    @property
    def unit_shape(self) -> tuple[int, ...]:
        return (self.W.shape[1],)

    @property
    def out_shape(self) -> tuple[int, ...]:
        return self.unit_shape

    @property
    def units(self) -> int:
        return self.W.shape[1]

    def effective_weights(self) -> np.ndarray:
        if self.weight_norm:
            return weight_normalize(self.W, self.gain, axis=0)
        return self.W

    def current(self, x: np.ndarray) -> np.ndarray:
        x = x.reshape(x.shape[0], -1)
        if x.shape[1] != self.W.shape[0]:
            raise DimensionError(f"layer expects {self.W.shape[0]} inputs, got {x.shape[1]}")
        return x @ self.effective_weights()

    def recurrent_current(self, s_prev: np.ndarray) -> np.ndarray | float:
        if self.R is None:
            return 0.0
        if self.recurrent == "diagonal":
            return s_prev * np.diagonal(self.R)
        return s_prev @ self.R

    def weight_grad(self, pre: np.ndarray, g: np.ndarray) -> np.ndarray:
        d_eff = pre.reshape(pre.shape[0], -1).T @ g
        if self.weight_norm:
            return weight_normalize_backward(self.W, self.gain, d_eff, axis=0)
        return d_eff

    def recurrent_grad(self, s_prev: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.recurrent == "diagonal":
            return np.diag(np.sum(s_prev * g, axis=0))
        return s_prev.T @ g

    def pool(self, s: np.ndarray, ref: np.ndarray | None = None) -> np.ndarray:
        return s

    def state_tensors(self) -> list[np.ndarray]:
        return [self.W] if self.R is None else [self.W, self.R]


@dataclass
class ConvLayer:
    """Stride-1 2-D convolution, LIF on every (channel, y, x), then max-pooling.

    ``W`` is ``[out_channels, in_channels, k, k]``. Weight normalization, when
    enabled, acts per output channel over its whole kernel.
    """

    W: np.ndarray
    params: LifParams
    beta: float
    in_shape: tuple[int, int, int]
    padding: int = 1
    pool_size: int = 1
    weight_norm: bool = False
    gain: np.ndarray | None = None
    R: None = None
    recurrent: None = None
    kind: str = field(default="conv", init=False)

    def __post_init__(self):
        c_out, c_in, k, k2 = self.W.shape
        if k != k2:
            raise ConfigError("only square kernels are supported")
        if tuple(self.in_shape)[0] != c_in:
            raise ConfigError(f"kernel expects {c_in} input channels, input has {self.in_shape[0]}")
        h, w = self.unit_shape[1:]
        if h <= 0 or w <= 0:
            raise ConfigError("kernel larger than padded input")
        if h % self.pool_size or w % self.pool_size:
            raise ConfigError(f"conv output {(h, w)} not divisible by pool size {self.pool_size}")
        self.in_shape = tuple(self.in_shape)
        if self.weight_norm and self.gain is None:
            self.gain = np.ones(c_out, dtype=self.W.dtype)

    @property
    def unit_shape(self) -> tuple[int, int, int]:
        c_out, _, k, _ = self.W.shape
        _, h, w = self.in_shape
        return (c_out, h + 2 * self.padding - k + 1, w + 2 * self.padding - k + 1)

    @property
    def out_shape(self) -> tuple[int, int, int]:
        c, h, w = self.unit_shape
        return (c, h // self.pool_size, w // self.pool_size)

    @property
    def units(self) -> int:
        return int(np.prod(self.unit_shape))

    def effective_weights(self) -> np.ndarray:
        if self.weight_norm:
            return weight_normalize(self.W, self.gain, axis=(1, 2, 3))
        return self.W

    def _patches(self, x: np.ndarray) -> np.ndarray:
        x = x.reshape((x.shape[0],) + self.in_shape)
        p = self.padding
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        k = self.W.shape[2]
        win = sliding_window_view(x, (k, k), axis=(2, 3))  # [B, C, H', W', k, k]
        b, c, h, w = win.shape[:4]
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h * w, c * k * k)

    def current(self, x: np.ndarray) -> np.ndarray:
        W = self.effective_weights()
        cols = self._patches(x)
        out = cols @ W.reshape(W.shape[0], -1).T  # [B, P, C_out]
        c, h, w = self.unit_shape
        return out.transpose(0, 2, 1).reshape(x.shape[0], c, h, w)

    def recurrent_current(self, s_prev):
        return 0.0

    def weight_grad(self, pre: np.ndarray, g: np.ndarray) -> np.ndarray:
        cols = self._patches(pre)
        g = g.reshape(g.shape[0], g.shape[1], -1)  # [B, C_out, P]
        d_eff = np.einsum("bop,bpk->ok", g, cols).reshape(self.W.shape)
        if self.weight_norm:
            return weight_normalize_backward(self.W, self.gain, d_eff, axis=(1, 2, 3))
        return d_eff

    def pool(self, s: np.ndarray, ref: np.ndarray | None = None) -> np.ndarray:
        if ref is None:
            return max_pool(s, self.pool_size)
        return pool_by_reference(s, ref, self.pool_size)

    def state_tensors(self) -> list[np.ndarray]:
        return [self.W]

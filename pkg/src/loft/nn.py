"""Minimal dense/convolutional neural substrate with explicit backprop.

Tensors are plain float64 numpy arrays (row-major); images are NHWC.
Parameters live in a ParamStore keyed by stable slash-paths such as
``enc/conv1/w`` with gradient buffers of identical shape, so gradient
flow between subnetworks can be controlled explicitly: every backward
pass takes an ``accumulate`` switch that either adds into the store's
gradients or only propagates to the input.

Any non-finite value produced by a forward or backward pass raises
NumericFaultError rather than silently poisoning training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class NumericFaultError(ArithmeticError):
    """A layer produced NaN or Inf."""


# largest im2col buffer (elements) worth materializing for a single GEMM
_IM2COL_ELEMENT_LIMIT = 4_000_000


class GradientStateError(RuntimeError):
    """Optimizer stepped a store whose gradients were never populated."""


def _check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericFaultError(f"non-finite values out of {where}")
    return arr


class ParamStore:
    """Named parameter tensors plus mirrored gradient buffers."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.params[name] = np.asarray(value, dtype=np.float64)
        self.grads[name] = np.zeros_like(self.params[name])

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0.0

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_params(self, params: dict[str, np.ndarray]):
        for k, v in params.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k!r}")
            if self.params[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k!r}")
            self.params[k][...] = v

    def l2_norms(self) -> dict[str, float]:
        return {k: float(np.linalg.norm(v)) for k, v in self.params.items()}


def _same_pad(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)  # ceil division
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def conv2d_forward(x, w, b, stride=1, padding="same"):
    """Cross-correlation over NHWC input with (kh, kw, cin, f) weights."""
    n, hh, ww, cin = x.shape
    kh, kw, cw, f = w.shape
    if cw != cin:
        raise ValueError(f"input has {cin} channels, kernel expects {cw}")
    if padding == "same":
        oh, pt, pb = _same_pad(hh, kh, stride)
        ow, pl, pr = _same_pad(ww, kw, stride)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    elif padding == "valid":
        oh = (hh - kh) // stride + 1
        ow = (ww - kw) // stride + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"kernel {kh}x{kw} larger than input {hh}x{ww}")
        xp = x
        pt = pl = 0
    else:
        raise ValueError(f"unknown padding mode {padding!r}")
    # one BLAS call over an im2col view when the materialized copy stays
    # small; otherwise accumulate per kernel offset to avoid huge buffers
    if n * oh * ow * cin * kh * kw <= _IM2COL_ELEMENT_LIMIT:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
        win = win[:, ::stride, ::stride]
        y = np.tensordot(win, w, axes=([3, 4, 5], [2, 0, 1])) + b
    else:
        y = np.tile(b, (n, oh, ow, 1))
        for i in range(kh):
            for j in range(kw):
                y += xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] @ w[i, j]
    cache = (xp, x.shape, (pt, pl), stride, w.shape)
    return _check_finite(y, "conv2d"), cache


def conv2d_backward(dy, w, cache, need_param_grads=True):
    """Gradients of a scalar loss w.r.t. conv input (and optionally
    weights/bias; skipping them halves the cost of pure chain-rule passes)."""
    xp, x_shape, (pt, pl), stride, w_shape = cache
    kh, kw, cin, f = w_shape
    n, oh, ow, _ = dy.shape
    dw = db = None
    if need_param_grads:
        if n * oh * ow * cin * kh * kw <= _IM2COL_ELEMENT_LIMIT:
            win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
            win = win[:, ::stride, ::stride]
            dw = np.tensordot(win, dy, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
        else:
            dw = np.empty(w_shape)
            for i in range(kh):
                for j in range(kw):
                    xs = xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]
                    dw[i, j] = np.einsum("nhwc,nhwf->cf", xs, dy)
        db = dy.sum(axis=(0, 1, 2))
    if stride == 1:
        # gather form: full correlation of the padded upstream gradient
        # with the flipped kernel writes each input cell exactly once
        dyp = np.pad(dy, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(dyp, (kh, kw), axis=(1, 2))
        dxp = np.tensordot(win, w[::-1, ::-1], axes=([3, 4, 5], [3, 0, 1]))
    else:
        dxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += dy @ w[i, j].T
    _, hh, ww, _ = x_shape
    dx = dxp[:, pt : pt + hh, pl : pl + ww, :]
    return _check_finite(dx, "conv2d backward"), dw, db


def dense_forward(x, w, b):
    y = x @ w + b
    return _check_finite(y, "dense"), x


def dense_backward(dy, w, cache, need_param_grads=True):
    x = cache
    dw = db = None
    if need_param_grads:
        dw = x.T @ dy
        db = dy.sum(axis=0)
    dx = dy @ w.T
    return _check_finite(dx, "dense backward"), dw, db


def dropout_forward(x, rate, train, rng=None):
    """Inverted dropout: kept units scaled by 1/(1-rate) so eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(dy, cache):
    return dy if cache is None else dy * cache


def _sigmoid(x):
    # two-branch form avoids exp overflow for large |x|
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_ACTIVATIONS = {
    "relu": (lambda x: np.maximum(x, 0.0), lambda y, dy: dy * (y > 0.0)),
    "sigmoid": (_sigmoid, lambda y, dy: dy * y * (1.0 - y)),
    "tanh": (np.tanh, lambda y, dy: dy * (1.0 - y * y)),
}


def activation_forward(x, kind):
    try:
        fwd, _ = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    y = fwd(x)
    return _check_finite(y, kind), y


def activation_backward(dy, kind, cache):
    _, bwd = _ACTIVATIONS[kind]
    return _check_finite(bwd(cache, dy), f"{kind} backward")


# ---------------------------------------------------------------------------
# layer objects: thin wrappers binding the ops above to named parameters


class Layer:
    def __init__(self, name: str):
        self.name = name

    def build(self, in_shape, store: ParamStore, rng) -> tuple:
        return in_shape

    def forward(self, store, x, train, rng):
        raise NotImplementedError

    def backward(self, store, dy, cache, accumulate=True):
        raise NotImplementedError


def _glorot(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Conv2D(Layer):
    def __init__(self, name, filters, kernel, stride=1, padding="same"):
        super().__init__(name)
        if kernel % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {kernel}")
        if stride < 1:
            raise ValueError(f"stride must be >= 1, got {stride}")
        self.filters, self.kernel, self.stride, self.padding = filters, kernel, stride, padding

    def build(self, in_shape, store, rng):
        h, w, c = in_shape
        shape = (self.kernel, self.kernel, c, self.filters)
        fan_in = self.kernel * self.kernel * c
        fan_out = self.kernel * self.kernel * self.filters
        store.add(f"{self.name}/w", _glorot(rng, shape, fan_in, fan_out))
        store.add(f"{self.name}/b", np.zeros(self.filters))
        if self.padding == "same":
            oh, ow = -(-h // self.stride), -(-w // self.stride)
        else:
            oh = (h - self.kernel) // self.stride + 1
            ow = (w - self.kernel) // self.stride + 1
        return (oh, ow, self.filters)

    def forward(self, store, x, train, rng):
        return conv2d_forward(
            x, store.params[f"{self.name}/w"], store.params[f"{self.name}/b"],
            self.stride, self.padding,
        )

    def backward(self, store, dy, cache, accumulate=True):
        dx, dw, db = conv2d_backward(
            dy, store.params[f"{self.name}/w"], cache, need_param_grads=accumulate
        )
        if accumulate:
            store.grads[f"{self.name}/w"] += dw
            store.grads[f"{self.name}/b"] += db
        return dx


class Dense(Layer):
    def __init__(self, name, units):
        super().__init__(name)
        self.units = units

    def build(self, in_shape, store, rng):
        (d,) = in_shape
        store.add(f"{self.name}/w", _glorot(rng, (d, self.units), d, self.units))
        store.add(f"{self.name}/b", np.zeros(self.units))
        return (self.units,)

    def forward(self, store, x, train, rng):
        return dense_forward(x, store.params[f"{self.name}/w"], store.params[f"{self.name}/b"])

    def backward(self, store, dy, cache, accumulate=True):
        dx, dw, db = dense_backward(
            dy, store.params[f"{self.name}/w"], cache, need_param_grads=accumulate
        )
        if accumulate:
            store.grads[f"{self.name}/w"] += dw
            store.grads[f"{self.name}/b"] += db
        return dx


class Dropout(Layer):
    def __init__(self, name, rate):
        super().__init__(name)
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, store, x, train, rng):
        return dropout_forward(x, self.rate, train, rng)

    def backward(self, store, dy, cache, accumulate=True):
        return dropout_backward(dy, cache)


class Activation(Layer):
    def __init__(self, name, kind):
        super().__init__(name)
        if kind not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, store, x, train, rng):
        return activation_forward(x, self.kind)

    def backward(self, store, dy, cache, accumulate=True):
        return activation_backward(dy, self.kind, cache)


class Flatten(Layer):
    def build(self, in_shape, store, rng):
        return (int(np.prod(in_shape)),)

    def forward(self, store, x, train, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, store, dy, cache, accumulate=True):
        return dy.reshape(cache)


class Reshape(Layer):
    def __init__(self, name, target):
        super().__init__(name)
        self.target = tuple(target)

    def build(self, in_shape, store, rng):
        if int(np.prod(in_shape)) != int(np.prod(self.target)):
            raise ValueError(f"cannot reshape {in_shape} to {self.target}")
        return self.target

    def forward(self, store, x, train, rng):
        return x.reshape((x.shape[0],) + self.target), x.shape

    def backward(self, store, dy, cache, accumulate=True):
        return dy.reshape(cache)


class ResizeNearest(Layer):
    """Nearest-neighbour spatial resize to a fixed (height, width)."""

    def __init__(self, name, out_hw):
        super().__init__(name)
        self.out_hw = tuple(out_hw)

    def build(self, in_shape, store, rng):
        h, w, c = in_shape
        self.in_hw = (h, w)
        return (self.out_hw[0], self.out_hw[1], c)

    def forward(self, store, x, train, rng):
        h, w = x.shape[1], x.shape[2]
        oh, ow = self.out_hw
        ri = (np.arange(oh) * h) // oh
        ci = (np.arange(ow) * w) // ow
        return x[:, ri][:, :, ci], (h, w, ri, ci)

    def backward(self, store, dy, cache, accumulate=True):
        h, w, ri, ci = cache
        if np.array_equal(np.unique(ri), np.arange(h)) and np.array_equal(
            np.unique(ci), np.arange(w)
        ):
            # pure upsampling: each source cell owns a contiguous block
            row_starts = np.searchsorted(ri, np.arange(h))
            col_starts = np.searchsorted(ci, np.arange(w))
            return np.add.reduceat(
                np.add.reduceat(dy, row_starts, axis=1), col_starts, axis=2
            )
        dx = np.zeros((dy.shape[0], h, w, dy.shape[3]))
        np.add.at(dx, (slice(None), ri[:, None], ci[None, :]), dy)
        return dx


class Network:
    """A named sequence of layers sharing one ParamStore."""

    def __init__(self, name: str, layers: list[Layer], in_shape: tuple, seed_rng):
        self.name = name
        self.layers = layers
        self.store = ParamStore()
        self.in_shape = tuple(in_shape)
        shape = self.in_shape
        for layer in layers:
            shape = layer.build(shape, self.store, seed_rng)
        self.out_shape = shape

    def forward(self, x, train=False, rng=None, taps: tuple[int, ...] = ()):
        """Run all layers; returns (output, caches, {tap_index: activation})."""
        caches = []
        tapped = {}
        for i, layer in enumerate(self.layers):
            x, cache = layer.forward(self.store, x, train, rng)
            caches.append(cache)
            if i in taps:
                tapped[i] = x
        return x, caches, tapped

    def backward(self, dy, caches, accumulate=True, inject: dict[int, np.ndarray] | None = None):
        """Backpropagate dy from the output; `inject` adds extra gradient
        at intermediate layer outputs (keyed by layer index)."""
        inject = inject or {}
        for i in range(len(self.layers) - 1, -1, -1):
            if i in inject:
                dy = dy + inject[i]
            dy = self.layers[i].backward(self.store, dy, caches[i], accumulate)
        return dy

    def backward_from(self, index, dy, caches, accumulate=True):
        """Backpropagate a gradient injected at the output of layer `index`
        down to the network input, skipping the layers above."""
        for i in range(index, -1, -1):
            dy = self.layers[i].backward(self.store, dy, caches[i], accumulate)
        return dy


# ---------------------------------------------------------------------------
# optimizers


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, store: ParamStore):
        if not store.grads:
            raise GradientStateError("store has no gradient buffers")
        for k, p in store.params.items():
            p -= self.lr * store.grads[k]


class Adam:
    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, store: ParamStore):
        if not store.grads:
            raise GradientStateError("store has no gradient buffers")
        if not self.m:
            for k, p in store.params.items():
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        scale = self.lr * math.sqrt(c2) / c1
        for k, p in store.params.items():
            g = store.grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= scale * m / (np.sqrt(v) + self.eps * math.sqrt(c2))


def make_optimizer(method: str, lr: float):
    if method == "sgd":
        return Sgd(lr)
    if method == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {method!r}")


def numeric_gradient(f, x, eps=1e-5):
    """Central finite differences of a scalar function at x (elementwise)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = f(x)
        x[idx] = orig - eps
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * eps)
        it.iternext()
    return grad

"""Layers with explicit forward/backward passes.

Conventions shared by every layer:

* ``forward`` caches what ``backward`` needs and returns the output.
* ``backward(e)`` receives the error of the *summed* batch loss with respect
  to the layer output and returns the error with respect to the layer input.
  Parameter gradients are stored in ``self.grads`` already divided by the
  batch size, i.e. they are gradients of the mean loss.
* Activation derivatives are owned by activation layers; fully-connected and
  convolution layers never apply ``f'`` themselves.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError, GeometryError, StateError

FC, CONV, BATCHNORM, ACTIVATION, DROPOUT, MAXPOOL, FLATTEN = range(1, 8)

ACTIVATIONS = ("relu", "sigmoid", "tanh")


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Layer:
    tag = 0
    name = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, train=True, rng=None):
        raise NotImplementedError

    def backward(self, e, propagate=True):
        """Error w.r.t. the input; ``propagate=False`` lets parameter layers skip it."""
        raise NotImplementedError

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state that belongs in a checkpoint."""
        return {}

    def state(self) -> dict[str, np.ndarray]:
        return {**self.params, **self.buffers()}

    def zero_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def __repr__(self):
        return self.name


class FullyConnected(Layer):
    """``out = x W^T + b`` for a batch ``x`` of shape ``B x n_in``."""

    tag = FC

    def __init__(self, n_in: int, n_out: int, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.params["weight"] = he_normal(rng, (n_out, n_in), n_in, dtype)
        self.params["bias"] = np.zeros(n_out, dtype=dtype)
        self.input = None
        self.preact = None
        self.name = f"fc{n_in}x{n_out}"

    @property
    def weight(self):
        return self.params["weight"]

    def output_shape(self, in_shape):
        if in_shape != (self.n_in,):
            raise DimensionError(f"{self.name} expects width {self.n_in}, got {in_shape}")
        return (self.n_out,)

    def forward(self, x, train=True, rng=None):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise DimensionError(f"{self.name} expects input (B, {self.n_in}), got {x.shape}")
        out = T.matmul(x, T.transpose(self.weight)) + self.params["bias"]
        self.input, self.preact = x, out
        return out

    def backward_error(self, e):
        """``e W``: the error at the layer input, before any activation derivative."""
        if self.input is None:
            raise StateError(f"{self.name}: backward before forward")
        if e.shape != self.preact.shape:
            raise DimensionError(f"{self.name}: error {e.shape} vs output {self.preact.shape}")
        return T.matmul(e, self.weight)

    def gradient(self, e):
        """Batch-averaged outer products ``mean_b e_b o_b^T`` and the mean bias error."""
        if self.input is None:
            raise StateError(f"{self.name}: gradient before forward")
        if e.shape[0] != self.input.shape[0]:
            raise StateError(f"{self.name}: batch {e.shape[0]} vs cached {self.input.shape[0]}")
        b = e.shape[0]
        dw = T.matmul(T.transpose(e), self.input) / e.dtype.type(b)
        db = np.mean(e, axis=0)
        self.grads = {"weight": dw, "bias": db}
        return dw, db

    def backward(self, e, propagate=True):
        self.gradient(e)
        return self.backward_error(e) if propagate else None


class Conv2d(Layer):
    tag = CONV

    def __init__(self, c_in, c_out, k=3, stride=1, pad=1, rng=None, dtype=np.float32, bias=True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.k, self.stride, self.pad = c_in, c_out, k, stride, pad
        self.params["kernel"] = he_normal(rng, (c_out, c_in, k, k), c_in * k * k, dtype)
        if bias:
            self.params["bias"] = np.zeros(c_out, dtype=dtype)
        self.input = None
        self.preact = None
        self.name = f"conv{c_in}x{c_out}k{k}"

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.c_in:
            raise GeometryError(f"{self.name} expects ({self.c_in}, H, W), got {in_shape}")
        _, h, w = in_shape
        ho = T.conv_output_size(h, self.k, self.stride, self.pad)
        wo = T.conv_output_size(w, self.k, self.stride, self.pad)
        if ho < 1 or wo < 1:
            raise GeometryError(f"{self.name}: non-positive output extent for input {in_shape}")
        return (self.c_out, ho, wo)

    def forward(self, x, train=True, rng=None):
        out = T.conv2d_forward(x, self.params["kernel"], self.stride, self.pad)
        if "bias" in self.params:
            out += self.params["bias"][None, :, None, None]
        self.input, self.preact = x, out
        return out

    def backward(self, e, propagate=True):
        if self.input is None:
            raise StateError(f"{self.name}: backward before forward")
        b = e.dtype.type(e.shape[0])
        x = self.input
        self.grads = {
            "kernel": T.conv2d_backward_kernel(x, e, self.stride, self.pad, (self.k, self.k)) / b
        }
        if "bias" in self.params:
            self.grads["bias"] = e.sum(axis=(0, 2, 3)) / b
        if not propagate:
            return None
        return T.conv2d_backward_data(e, self.params["kernel"], self.stride, self.pad, x.shape[2:])


class BatchNorm(Layer):
    """Per-channel batch normalisation for ``B x C`` or ``N x C x H x W`` inputs."""

    tag = BATCHNORM

    def __init__(self, channels, eps=1e-5, momentum=0.9, dtype=np.float32):
        super().__init__()
        if eps <= 0:
            raise ValueError("epsilon must be positive")
        self.eps, self.momentum = eps, momentum
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.cache = None
        self.name = f"bn{channels}"

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    @staticmethod
    def _axes(x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    @staticmethod
    def _bcast(v, x):
        return v if x.ndim == 2 else v[None, :, None, None]

    def forward(self, x, train=True, rng=None):
        axes = self._axes(x)
        dt = x.dtype.type
        if train:
            if x.shape[0] < 2:
                raise StateError("batch normalisation needs a batch of at least 2 in train mode")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = dt(self.momentum)
            self.running_mean = (m * self.running_mean + (1 - m) * mean).astype(x.dtype)
            self.running_var = (m * self.running_var + (1 - m) * var).astype(x.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = (1.0 / np.sqrt(var + dt(self.eps))).astype(x.dtype)
        xhat = (x - self._bcast(mean, x)) * self._bcast(inv_std, x)
        self.cache = (xhat, inv_std, axes)
        return self._bcast(self.params["gamma"], x) * xhat + self._bcast(self.params["beta"], x)

    def backward(self, e, propagate=True):
        if self.cache is None:
            raise StateError(f"{self.name}: backward before forward")
        xhat, inv_std, axes = self.cache
        m = e.size // e.shape[1]
        b = e.dtype.type(e.shape[0])
        sum_e = e.sum(axis=axes)
        sum_exh = (e * xhat).sum(axis=axes)
        self.grads = {"gamma": sum_exh / b, "beta": sum_e / b}
        scale = self._bcast(self.params["gamma"] * inv_std / e.dtype.type(m), e)
        return scale * (m * e - self._bcast(sum_e, e) - xhat * self._bcast(sum_exh, e))


def activation_forward(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    if kind == "tanh":
        return np.tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_derivative(kind: str, x: np.ndarray) -> np.ndarray:
    """f'(x) evaluated at the pre-activation; ReLU'(0) is 0."""
    if kind == "relu":
        return (x > 0).astype(x.dtype)
    y = activation_forward(kind, x)
    if kind == "sigmoid":
        return y * (1 - y)
    return 1 - y * y


class Activation(Layer):
    tag = ACTIVATION

    def __init__(self, kind="relu"):
        super().__init__()
        if kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}; choose from {ACTIVATIONS}")
        self.kind = kind
        self.preact = None
        self.name = kind

    def forward(self, x, train=True, rng=None):
        self.preact = x
        return T.check_finite(activation_forward(self.kind, x), self.kind)

    def fprime(self):
        if self.preact is None:
            raise StateError(f"{self.kind}: derivative requested before forward")
        return activation_derivative(self.kind, self.preact)

    def backward(self, e, propagate=True):
        return T.hadamard(e, self.fprime())


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by ``1/(1-p)`` at train time."""

    tag = DROPOUT

    def __init__(self, p=0.5):
        super().__init__()
        if not 0 <= p < 1:
            raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
        self.p = p
        self.mask = None
        self.name = f"dropout{p:g}"

    def forward(self, x, train=True, rng=None):
        if not train:
            self.mask = None
            return x
        if self.p == 0:
            self.mask = np.ones_like(x)
            return x
        if rng is None:
            raise StateError("dropout needs an rng in train mode")
        keep = rng.random(x.shape) >= self.p
        self.mask = keep.astype(x.dtype) / x.dtype.type(1 - self.p)
        return x * self.mask

    def backward(self, e, propagate=True):
        if self.mask is None:
            raise StateError("dropout backward without a cached train-mode mask")
        return e * self.mask


class MaxPool(Layer):
    tag = MAXPOOL

    def __init__(self, k=2, stride=None):
        super().__init__()
        self.k = k
        self.stride = stride or k
        self.argmax = None
        self.in_shape = None
        self.name = f"maxpool{k}"

    def output_shape(self, in_shape):
        c, h, w = in_shape
        ho, wo = (h - self.k) // self.stride + 1, (w - self.k) // self.stride + 1
        if self.k > h or self.k > w:
            raise GeometryError(f"pool window {self.k} larger than input {h}x{w}")
        return (c, ho, wo)

    def forward(self, x, train=True, rng=None):
        out, self.argmax = T.maxpool2d_forward(x, self.k, self.stride)
        self.in_shape = x.shape
        return out

    def backward(self, e, propagate=True):
        if self.argmax is None:
            raise StateError("maxpool backward before forward")
        return T.maxpool2d_backward(e, self.argmax, self.in_shape)


class Flatten(Layer):
    tag = FLATTEN
    name = "flatten"

    def __init__(self):
        super().__init__()
        self.in_shape = None

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train=True, rng=None):
        self.in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, e, propagate=True):
        if self.in_shape is None:
            raise StateError("flatten backward before forward")
        return e.reshape(self.in_shape)

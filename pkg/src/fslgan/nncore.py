"""Layer-granular neural network core.

Every layer owns its parameters, gradients and forward cache, and exposes an
independent ``forward``/``backward`` pair. A network is an ordered list of
layers, which is what lets a discriminator be cut at any layer boundary and
executed piecewise on different devices.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class NumericError(FloatingPointError):
    """Raised when a layer produces NaN or Inf from finite input."""


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


def _check_finite(layer: "Layer", out: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{layer.kind}: non-finite values in {what}")
    return out


class Layer:
    kind = "Layer"

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def _add_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = np.ascontiguousarray(value, dtype=DTYPE)
        self.grads[name] = np.zeros_like(self.params[name])

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape (no batch axis) for a per-sample input shape."""
        return tuple(input_shape)

    def forward(self, x: np.ndarray, train: bool = True, update_stats: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, param_grads: bool = True) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def _cached(self):
        if self._cache is None:
            raise StateError(f"{self.kind}.backward called before forward")
        return self._cache

    def __repr__(self) -> str:
        return f"{self.kind}()"


# ---------------------------------------------------------------------------
# convolution helpers


def _im2col(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """(B, C, Hp, Wp) padded input -> (B*out_h*out_w, C*k*k) patch matrix."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]
    b, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * out_h * out_w, c * k * k)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int, stride: int,
            out_h: int, out_w: int) -> np.ndarray:
    """Scatter-add inverse of :func:`_im2col` into a zero (B, C, Hp, Wp) array.

    ``cols`` is channel-major, (C*k*k, B*out_h*out_w), which is what the callers'
    matmuls produce without any transpose copy.
    """
    b, c, hp, wp = shape
    cols = cols.reshape(c, k, k, b, out_h, out_w)
    xp = np.zeros((c, b, hp, wp), dtype=DTYPE)
    h_end = (out_h - 1) * stride + 1
    w_end = (out_w - 1) * stride + 1
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + h_end : stride, j : j + w_end : stride] += cols[:, i, j]
    return xp.transpose(1, 0, 2, 3)


def _expect(x: np.ndarray, ndim: int, channels: int, layer: Layer) -> None:
    if x.ndim != ndim or x.shape[1] != channels:
        raise ShapeError(f"{layer!r} expected {ndim}-d input with {channels} channels, got {x.shape}")


class Conv2d(Layer):
    kind = "Conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 4,
                 stride: int = 2, padding: int = 1, bias: bool = True) -> None:
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self._add_param("weight", np.zeros((out_channels, in_channels, kernel_size, kernel_size)))
        if bias:
            self._add_param("bias", np.zeros(out_channels))

    def _out_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        oh, ow = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"{self!r}: input {h}x{w} too small")
        return oh, ow

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if c != self.in_channels:
            raise ShapeError(f"{self!r}: expected {self.in_channels} channels, got {c}")
        return (self.out_channels, *self._out_hw(h, w))

    def forward(self, x, train=True, update_stats=True):
        _expect(x, 4, self.in_channels, self)
        b, _, h, w = x.shape
        oh, ow = self._out_hw(h, w)
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = _im2col(xp, self.kernel_size, self.stride, oh, ow)
        wmat = self.params["weight"].reshape(self.out_channels, -1)
        out = cols @ wmat.T
        if "bias" in self.params:
            out += self.params["bias"]
        self._cache = (cols, xp.shape, oh, ow)
        out = out.reshape(b, oh, ow, self.out_channels).transpose(0, 3, 1, 2)
        return _check_finite(self, np.ascontiguousarray(out), "forward output")

    def backward(self, grad, param_grads=True):
        cols, xp_shape, oh, ow = self._cached()
        b = xp_shape[0]
        if grad.shape != (b, self.out_channels, oh, ow):
            raise ShapeError(f"{self!r}: upstream grad shape {grad.shape}")
        gmat = grad.transpose(0, 2, 3, 1).reshape(b * oh * ow, self.out_channels)
        if param_grads:
            self.grads["weight"] += (gmat.T @ cols).reshape(self.params["weight"].shape)
            if "bias" in self.grads:
                self.grads["bias"] += gmat.sum(axis=0)
        g_cm = grad.transpose(1, 0, 2, 3).reshape(self.out_channels, b * oh * ow)
        dcols = self.params["weight"].reshape(self.out_channels, -1).T @ g_cm
        dxp = _col2im(dcols, xp_shape, self.kernel_size, self.stride, oh, ow)
        p = self.padding
        dx = dxp[:, :, p : xp_shape[2] - p, p : xp_shape[3] - p] if p else dxp
        return _check_finite(self, np.ascontiguousarray(dx), "input gradient")

    def __repr__(self):
        return (f"Conv2d({self.in_channels}->{self.out_channels}, k={self.kernel_size}, "
                f"s={self.stride}, p={self.padding})")


class ConvTranspose2d(Layer):
    """Transposed convolution; weight layout (in_channels, out_channels, k, k)."""

    kind = "ConvTranspose2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 4,
                 stride: int = 2, padding: int = 1, bias: bool = True) -> None:
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self._add_param("weight", np.zeros((in_channels, out_channels, kernel_size, kernel_size)))
        if bias:
            self._add_param("bias", np.zeros(out_channels))

    def _out_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        oh, ow = (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k
        if oh < 1 or ow < 1:
            raise ShapeError(f"{self!r}: degenerate output for input {h}x{w}")
        return oh, ow

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if c != self.in_channels:
            raise ShapeError(f"{self!r}: expected {self.in_channels} channels, got {c}")
        return (self.out_channels, *self._out_hw(h, w))

    def forward(self, x, train=True, update_stats=True):
        _expect(x, 4, self.in_channels, self)
        b, _, h, w = x.shape
        oh, ow = self._out_hw(h, w)
        k, s, p = self.kernel_size, self.stride, self.padding
        xmat = x.transpose(0, 2, 3, 1).reshape(b * h * w, self.in_channels)
        cols = self.params["weight"].reshape(self.in_channels, -1).T @ xmat.T
        full = _col2im(cols, (b, self.out_channels, oh + 2 * p, ow + 2 * p), k, s, h, w)
        out = full[:, :, p : p + oh, p : p + ow]
        if "bias" in self.params:
            out = out + self.params["bias"][None, :, None, None]
        self._cache = (xmat, x.shape, oh, ow)
        return _check_finite(self, np.ascontiguousarray(out), "forward output")

    def backward(self, grad, param_grads=True):
        xmat, x_shape, oh, ow = self._cached()
        b, _, h, w = x_shape
        if grad.shape != (b, self.out_channels, oh, ow):
            raise ShapeError(f"{self!r}: upstream grad shape {grad.shape}")
        p = self.padding
        gp = np.pad(grad, ((0, 0), (0, 0), (p, p), (p, p))) if p else grad
        cols = _im2col(gp, self.kernel_size, self.stride, h, w)
        wmat = self.params["weight"].reshape(self.in_channels, -1)
        if param_grads:
            self.grads["weight"] += (xmat.T @ cols).reshape(self.params["weight"].shape)
            if "bias" in self.grads:
                self.grads["bias"] += grad.sum(axis=(0, 2, 3))
        dx = (cols @ wmat.T).reshape(b, h, w, self.in_channels).transpose(0, 3, 1, 2)
        return _check_finite(self, np.ascontiguousarray(dx), "input gradient")

    def __repr__(self):
        return (f"ConvTranspose2d({self.in_channels}->{self.out_channels}, k={self.kernel_size}, "
                f"s={self.stride}, p={self.padding})")


class BatchNorm2d(Layer):
    kind = "BatchNorm2d"

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1) -> None:
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self._add_param("weight", np.ones(num_features))
        self._add_param("bias", np.zeros(num_features))
        self.buffers["running_mean"] = np.zeros(num_features, dtype=DTYPE)
        self.buffers["running_var"] = np.ones(num_features, dtype=DTYPE)

    def output_shape(self, input_shape):
        if input_shape[0] != self.num_features:
            raise ShapeError(f"{self!r}: expected {self.num_features} channels, got {input_shape[0]}")
        return tuple(input_shape)

    def forward(self, x, train=True, update_stats=True):
        _expect(x, 4, self.num_features, self)
        gamma = self.params["weight"][None, :, None, None]
        beta = self.params["bias"][None, :, None, None]
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if update_stats:
                n = x.size // self.num_features
                m = self.momentum
                unbiased = var * n / max(n - 1, 1)
                self.buffers["running_mean"][:] = (1 - m) * self.buffers["running_mean"] + m * mean
                self.buffers["running_var"][:] = (1 - m) * self.buffers["running_var"] + m * unbiased
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, train)
        return _check_finite(self, gamma * xhat + beta, "forward output")

    def backward(self, grad, param_grads=True):
        xhat, inv_std, train = self._cached()
        if grad.shape != xhat.shape:
            raise ShapeError(f"{self!r}: upstream grad shape {grad.shape}")
        if param_grads:
            self.grads["weight"] += (grad * xhat).sum(axis=(0, 2, 3))
            self.grads["bias"] += grad.sum(axis=(0, 2, 3))
        g = grad * self.params["weight"][None, :, None, None]
        if train:
            g_mean = g.mean(axis=(0, 2, 3), keepdims=True)
            gx_mean = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
            g = g - g_mean - xhat * gx_mean
        dx = g * inv_std[None, :, None, None]
        return _check_finite(self, dx, "input gradient")

    def __repr__(self):
        return f"BatchNorm2d({self.num_features})"


class _Elementwise(Layer):
    def _f(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _df(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def forward(self, x, train=True, update_stats=True):
        y = self._f(x)
        self._cache = (x, y)
        return _check_finite(self, y, "forward output")

    def backward(self, grad, param_grads=True):
        x, y = self._cached()
        if grad.shape != y.shape:
            raise ShapeError(f"{self!r}: upstream grad shape {grad.shape} vs output {y.shape}")
        return _check_finite(self, grad * self._df(x, y), "input gradient")


class ReLU(_Elementwise):
    kind = "ReLU"

    def _f(self, x):
        return np.maximum(x, 0.0)

    def _df(self, x, y):
        return (x > 0).astype(DTYPE)


class LeakyReLU(_Elementwise):
    kind = "LeakyReLU"

    def __init__(self, slope: float = 0.2) -> None:
        super().__init__()
        self.slope = slope

    def _f(self, x):
        return np.where(x > 0, x, self.slope * x)

    def _df(self, x, y):
        return np.where(x > 0, 1.0, self.slope)

    def __repr__(self):
        return f"LeakyReLU({self.slope})"


class Tanh(_Elementwise):
    kind = "Tanh"

    def _f(self, x):
        return np.tanh(x)

    def _df(self, x, y):
        return 1.0 - y * y


class Sigmoid(_Elementwise):
    kind = "Sigmoid"

    def _f(self, x):
        # split by sign so exp never overflows
        out = np.empty_like(x, dtype=DTYPE)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    def _df(self, x, y):
        return y * (1.0 - y)


class Flatten(Layer):
    kind = "Flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, train=True, update_stats=True):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad, param_grads=True):
        shape = self._cached()
        if grad.shape != (shape[0], int(np.prod(shape[1:]))):
            raise ShapeError(f"Flatten: upstream grad shape {grad.shape}")
        return grad.reshape(shape)


class Dense(Layer):
    kind = "Dense"

    def __init__(self, in_features: int, out_features: int, bias: bool = True) -> None:
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self._add_param("weight", np.zeros((out_features, in_features)))
        if bias:
            self._add_param("bias", np.zeros(out_features))

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.in_features,):
            raise ShapeError(f"{self!r}: expected ({self.in_features},), got {tuple(input_shape)}")
        return (self.out_features,)

    def forward(self, x, train=True, update_stats=True):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"{self!r}: got input {x.shape}")
        out = x @ self.params["weight"].T
        if "bias" in self.params:
            out += self.params["bias"]
        self._cache = x
        return _check_finite(self, out, "forward output")

    def backward(self, grad, param_grads=True):
        x = self._cached()
        if grad.shape != (x.shape[0], self.out_features):
            raise ShapeError(f"{self!r}: upstream grad shape {grad.shape}")
        if param_grads:
            self.grads["weight"] += grad.T @ x
            if "bias" in self.grads:
                self.grads["bias"] += grad.sum(axis=0)
        return _check_finite(self, grad @ self.params["weight"], "input gradient")

    def __repr__(self):
        return f"Dense({self.in_features}->{self.out_features})"


LAYER_KINDS = {cls.kind: cls for cls in
               (Conv2d, ConvTranspose2d, BatchNorm2d, LeakyReLU, ReLU, Tanh, Sigmoid, Flatten, Dense)}


def layer_forward(layer: Layer, x: np.ndarray, mode: str = "train") -> np.ndarray:
    return layer.forward(x, train=(mode == "train"))


def layer_backward(layer: Layer, upstream_grad: np.ndarray) -> np.ndarray:
    return layer.backward(upstream_grad)


# ---------------------------------------------------------------------------


class Network:
    """Ordered stack of layers with a fixed per-sample input shape."""

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int]) -> None:
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.mode = "train"
        self.shapes = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(layer.output_shape(self.shapes[-1]))

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def train(self) -> "Network":
        self.mode = "train"
        return self

    def eval(self) -> "Network":
        self.mode = "eval"
        return self

    def forward(self, x: np.ndarray, update_stats: bool = True, start: int = 0,
                stop: int | None = None) -> np.ndarray:
        """Run layers ``start:stop``; the input must match ``shapes[start]``."""
        stop = len(self.layers) if stop is None else stop
        if tuple(x.shape[1:]) != self.shapes[start]:
            raise ShapeError(f"network input at layer {start}: expected {self.shapes[start]}, "
                             f"got {tuple(x.shape[1:])}")
        train = self.mode == "train"
        for layer in self.layers[start:stop]:
            x = layer.forward(x, train=train, update_stats=update_stats)
        return x

    def backward(self, grad: np.ndarray, param_grads: bool = True, start: int = 0,
                 stop: int | None = None) -> np.ndarray:
        stop = len(self.layers) if stop is None else stop
        for layer in reversed(self.layers[start:stop]):
            grad = layer.backward(grad, param_grads=param_grads)
        return grad

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def named_params(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        """(name, param, grad) triples in canonical order."""
        out = []
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                out.append((f"{i}.{name}", layer.params[name], layer.grads[name]))
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{i}.{name}", buf) for i, layer in enumerate(self.layers)
                for name, buf in layer.buffers.items()]

    def num_params(self) -> int:
        return sum(layer.num_params() for layer in self.layers)

    def summary(self) -> str:
        rows = [f"input {self.input_shape}"]
        for layer, shape in zip(self.layers, self.shapes[1:]):
            rows.append(f"{layer!r:<40} -> {shape}  params={layer.num_params()}")
        return "\n".join(rows)


def init_dcgan(net: Network, rng: np.random.Generator) -> None:
    """N(0, 0.02) conv/dense weights, N(1, 0.02) batch-norm scale, zero biases."""
    for layer in net.layers:
        if isinstance(layer, (Conv2d, ConvTranspose2d, Dense)):
            w = layer.params["weight"]
            w[...] = rng.normal(0.0, 0.02, size=w.shape)
            if "bias" in layer.params:
                layer.params["bias"].fill(0.0)
        elif isinstance(layer, BatchNorm2d):
            layer.params["weight"][...] = rng.normal(1.0, 0.02, size=layer.num_features)
            layer.params["bias"].fill(0.0)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: Iterable[tuple[np.ndarray, np.ndarray]], lr: float = 2e-4,
                 beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.pairs = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p, _ in self.pairs]
        self.v = [np.zeros_like(p) for p, _ in self.pairs]

    @classmethod
    def for_network(cls, net: Network, **kwargs) -> "Adam":
        return cls(((p, g) for _, p, g in net.named_params()), **kwargs)

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for (p, g), m, v in zip(self.pairs, self.m, self.v):
            if p.shape != g.shape:
                raise ShapeError(f"adam: param {p.shape} vs grad {g.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grads(self) -> None:
        for _, g in self.pairs:
            g.fill(0.0)


def adam_step(state: Adam) -> None:
    state.step()


# ---------------------------------------------------------------------------
# parameter transport


def serialize_params(net: Network, include_buffers: bool = False) -> np.ndarray:
    parts = [p.ravel() for _, p, _ in net.named_params()]
    if include_buffers:
        parts += [b.ravel() for _, b in net.named_buffers()]
    if not parts:
        return np.zeros(0, dtype=DTYPE)
    return np.concatenate(parts).astype(DTYPE, copy=False)


def state_size(net: Network, include_buffers: bool = False) -> int:
    n = net.num_params()
    if include_buffers:
        n += sum(b.size for _, b in net.named_buffers())
    return n


def deserialize_params(net: Network, vector: np.ndarray, include_buffers: bool = False) -> None:
    vector = np.asarray(vector, dtype=DTYPE)
    expected = state_size(net, include_buffers)
    if vector.ndim != 1 or vector.size != expected:
        raise ShapeError(f"parameter vector has {vector.size} entries, network needs {expected}")
    targets = [p for _, p, _ in net.named_params()]
    if include_buffers:
        targets += [b for _, b in net.named_buffers()]
    offset = 0
    for t in targets:
        t[...] = vector[offset : offset + t.size].reshape(t.shape)
        offset += t.size


def save_checkpoint(path: str | Path, vector: np.ndarray) -> None:
    """Little-endian uint32 count followed by that many little-endian f64 values."""
    vector = np.asarray(vector, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", vector.size))
        fh.write(vector.tobytes())


def load_checkpoint(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated checkpoint")
    (count,) = struct.unpack("<I", raw[:4])
    if len(raw) != 4 + 8 * count:
        raise ValueError(f"{path}: header says {count} values, payload has {(len(raw) - 4) / 8}")
    return np.frombuffer(raw, dtype="<f8", offset=4).astype(DTYPE)

"""Minimal layer set with exact reverse-mode gradients.

Activations are plain ndarrays shaped ``(batch, channels, length)`` for the
convolutional path and ``(batch, features)`` for dense layers.  Every layer
keeps what its backward pass needs from the most recent forward call, and
accumulates parameter gradients into ``layer.grads``.

The functional kernels (``conv1d_forward`` and friends) never modify their
inputs; the layer classes are thin stateful wrappers around them.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

__all__ = [
    "NonFiniteError",
    "Module",
    "Conv1d",
    "BatchNorm1d",
    "ReLU",
    "Dense",
    "SegmentPool",
    "Flatten",
    "Sequential",
    "conv1d_forward",
    "conv1d_backward",
    "batchnorm_forward",
    "batchnorm_backward",
    "relu_forward",
    "relu_backward",
    "dense_forward",
    "dense_backward",
    "segment_matrix",
    "grad_check",
]


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


def check_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(a).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return a


# ---------------------------------------------------------------------------
# functional kernels
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kernel_size: int) -> np.ndarray:
    """(B, C, L) -> (B, C*K, L); row ``c*K + k`` holds x shifted by ``k - K//2``."""
    B, C, L = x.shape
    pad = kernel_size // 2
    cols = np.empty((B, C, kernel_size, L), dtype=x.dtype)
    for k in range(kernel_size):
        s = k - pad
        if s < 0:
            cols[:, :, k, :-s] = 0
            cols[:, :, k, -s:] = x[:, :, :L + s]
        elif s > 0:
            cols[:, :, k, L - s:] = 0
            cols[:, :, k, :L - s] = x[:, :, s:]
        else:
            cols[:, :, k, :] = x
    return cols.reshape(B, C * kernel_size, L)


def _col2im(gcols: np.ndarray, kernel_size: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: (B, C*K, L) -> (B, C, L)."""
    B, CK, L = gcols.shape
    pad = kernel_size // 2
    g = gcols.reshape(B, CK // kernel_size, kernel_size, L)
    out = g[:, :, pad, :].copy()
    for k in range(kernel_size):
        s = k - pad
        if s < 0:
            out[:, :, :L + s] += g[:, :, k, -s:]
        elif s > 0:
            out[:, :, s:] += g[:, :, k, :L - s]
    return out


def conv1d_forward(layer: "Conv1d", x: np.ndarray,
                   cols: Optional[np.ndarray] = None) -> np.ndarray:
    """Stride-1 cross-correlation with zero same-padding.

    ``out[b, o, i] = bias[o] + sum_{c,k} w[o, c, k] * xpad[b, c, i + k]``
    """
    if x.ndim != 3 or x.shape[1] != layer.in_channels:
        raise ValueError(
            f"conv1d expects (batch, {layer.in_channels}, length), got {x.shape}")
    if cols is None:
        cols = _im2col(x, layer.kernel_size)
    w2 = layer.weight.reshape(layer.out_channels, -1)
    out = np.matmul(w2, cols)
    if layer.bias is not None:
        out += layer.bias[None, :, None]
    return out


def conv1d_backward(layer: "Conv1d", x: np.ndarray, grad_out: np.ndarray,
                    cols: Optional[np.ndarray] = None):
    """Return ``(grad_x, grad_w, grad_b)``; ``grad_b`` is None without bias."""
    B, C, L = x.shape
    if grad_out.shape != (B, layer.out_channels, L):
        raise ValueError(
            f"grad_out shape {grad_out.shape} != {(B, layer.out_channels, L)}")
    K = layer.kernel_size
    if cols is None:
        cols = _im2col(x, K)
    grad_w = np.matmul(grad_out, cols.transpose(0, 2, 1)).sum(axis=0)
    grad_w = grad_w.reshape(layer.weight.shape)
    grad_b = grad_out.sum(axis=(0, 2)) if layer.bias is not None else None

    w2 = layer.weight.reshape(layer.out_channels, -1)
    grad_x = _col2im(np.matmul(w2.T, grad_out), K)
    return grad_x, grad_w, grad_b


def batchnorm_forward(layer: "BatchNorm1d", x: np.ndarray, training: bool):
    """Per-channel normalization over (batch, length).

    Returns ``(out, cache)``.  In training mode batch statistics are used and
    the running estimates are updated in place on ``layer``.
    """
    if x.ndim != 3 or x.shape[1] != layer.num_features:
        raise ValueError(
            f"batchnorm expects (batch, {layer.num_features}, length), got {x.shape}")
    shape = (1, -1, 1)
    if training:
        if x.shape[0] < 2:
            raise ValueError("degenerate batch statistics: batch of 1 in train mode")
        n = x.shape[0] * x.shape[2]
        mean = x.mean(axis=(0, 2))
        centered = x - mean.reshape(shape)
        var = np.mean(centered * centered, axis=(0, 2))
        inv_std = 1.0 / np.sqrt(var + layer.eps)
        x_hat = centered * inv_std.reshape(shape)
        m = layer.momentum
        layer.running_mean = (1 - m) * layer.running_mean + m * mean
        layer.running_var = (1 - m) * layer.running_var + m * var * (n / (n - 1))
        cache = (x_hat, inv_std)
    else:
        inv_std = 1.0 / np.sqrt(layer.running_var + layer.eps)
        x_hat = (x - layer.running_mean.reshape(shape)) * inv_std.reshape(shape)
        cache = (x_hat, inv_std)
    out = layer.gamma.reshape(shape) * x_hat + layer.beta.reshape(shape)
    return out, cache


def batchnorm_backward(layer: "BatchNorm1d", cache, grad_out: np.ndarray):
    """Exact gradients of the train-mode forward: ``(grad_x, grad_gamma, grad_beta)``."""
    x_hat, inv_std = cache
    if grad_out.shape != x_hat.shape:
        raise ValueError(f"grad_out shape {grad_out.shape} != {x_hat.shape}")
    n = x_hat.shape[0] * x_hat.shape[2]
    grad_beta = grad_out.sum(axis=(0, 2))
    grad_gamma = np.sum(grad_out * x_hat, axis=(0, 2))
    shape = (1, -1, 1)
    scale = (layer.gamma * inv_std / n).reshape(shape)
    grad_x = scale * (n * grad_out - grad_beta.reshape(shape)
                      - x_hat * grad_gamma.reshape(shape))
    return grad_x, grad_gamma, grad_beta


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient 0 at the kink
    return grad_out * (x > 0)


def dense_forward(layer: "Dense", x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise ValueError(
            f"dense expects (batch, {layer.in_features}), got {x.shape}")
    return x @ layer.weight.T + layer.bias


def dense_backward(layer: "Dense", x: np.ndarray, grad_out: np.ndarray):
    if grad_out.shape != (x.shape[0], layer.out_features):
        raise ValueError(
            f"grad_out shape {grad_out.shape} != {(x.shape[0], layer.out_features)}")
    return grad_out @ layer.weight, grad_out.T @ x, grad_out.sum(axis=0)


def segment_matrix(length: int, segments: int) -> np.ndarray:
    """(length, segments) averaging matrix over contiguous, near-equal segments.

    Segment ``p`` covers ``[floor(p*L/P), ceil((p+1)*L/P))``.
    """
    P = np.zeros((length, segments))
    for p in range(segments):
        lo = (p * length) // segments
        hi = -((-(p + 1) * length) // segments)
        P[lo:hi, p] = 1.0 / (hi - lo)
    return P


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Module:
    """Base class: named parameters, gradient buffers, train/eval mode."""

    training = True

    def parameters(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(())

    def buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(())

    def children(self) -> Iterator["Module"]:
        return iter(())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for child in self.children():
            child.zero_grad()
        if hasattr(self, "grads"):
            for g in self.grads.values():
                g.fill(0)

    def gradients(self) -> Iterator[Tuple[str, np.ndarray]]:
        for name, _ in self.parameters():
            yield name, self._grad_lookup(name)

    def _grad_lookup(self, name):
        head, _, rest = name.partition(".")
        if rest:
            return self._child_by_name(head)._grad_lookup(rest)
        return self.grads[name]

    def _child_by_name(self, name):
        raise KeyError(name)

    def astype(self, dtype) -> "Module":
        for child in self.children():
            child.astype(dtype)
        for attr in self._array_attrs():
            val = getattr(self, attr)
            if val is not None:
                setattr(self, attr, val.astype(dtype))
        if hasattr(self, "grads"):
            self.grads = {k: v.astype(dtype) for k, v in self.grads.items()}
        return self

    def _array_attrs(self) -> Tuple[str, ...]:
        return ()


class Conv1d(Module):
    """Same-padded stride-1 1D convolution (cross-correlation)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 bias: bool = True, rng: Optional[np.random.Generator] = None):
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd int, got {kernel_size}")
        if in_channels < 1 or out_channels < 1:
            raise ValueError("channel counts must be positive")
        rng = np.random.default_rng() if rng is None else rng
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        fan_in = in_channels * kernel_size
        self.weight = rng.standard_normal((out_channels, in_channels, kernel_size)) \
            * np.sqrt(2.0 / fan_in)
        self.bias = np.zeros(out_channels) if bias else None
        self.grads = {"weight": np.zeros_like(self.weight)}
        if bias:
            self.grads["bias"] = np.zeros_like(self.bias)
        self._cache = None

    def _array_attrs(self):
        return ("weight", "bias")

    def parameters(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias

    def forward(self, x):
        cols = _im2col(x, self.kernel_size) if x.ndim == 3 else None
        out = conv1d_forward(self, x, cols)
        self._cache = (x, cols)
        return out

    def backward(self, grad_out):
        x, cols = self._cache
        gx, gw, gb = conv1d_backward(self, x, grad_out, cols)
        self.grads["weight"] += gw
        if gb is not None:
            self.grads["bias"] += gb
        return gx

    def __repr__(self):
        return (f"Conv1d({self.in_channels}, {self.out_channels}, "
                f"k={self.kernel_size}, bias={self.bias is not None})")


class BatchNorm1d(Module):
    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = np.ones(num_features)
        self.beta = np.zeros(num_features)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.grads = {"gamma": np.zeros(num_features), "beta": np.zeros(num_features)}
        self._cache = None

    def _array_attrs(self):
        return ("gamma", "beta", "running_mean", "running_var")

    def parameters(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var

    def forward(self, x):
        out, self._cache = batchnorm_forward(self, x, self.training)
        return out

    def backward(self, grad_out):
        if not self.training:
            x_hat, inv_std = self._cache
            gx = grad_out * (self.gamma * inv_std).reshape(1, -1, 1)
            self.grads["gamma"] += np.sum(grad_out * x_hat, axis=(0, 2))
            self.grads["beta"] += grad_out.sum(axis=(0, 2))
            return gx
        gx, gg, gb = batchnorm_backward(self, self._cache, grad_out)
        self.grads["gamma"] += gg
        self.grads["beta"] += gb
        return gx

    def __repr__(self):
        return f"BatchNorm1d({self.num_features})"


class ReLU(Module):
    def __init__(self):
        self._x = None

    def forward(self, x):
        self._x = x
        return relu_forward(x)

    def backward(self, grad_out):
        return relu_backward(self._x, grad_out)

    def __repr__(self):
        return "ReLU()"


class Dense(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: Optional[np.random.Generator] = None):
        rng = np.random.default_rng() if rng is None else rng
        self.in_features = in_features
        self.out_features = out_features
        self.weight = rng.standard_normal((out_features, in_features)) \
            * np.sqrt(2.0 / in_features)
        self.bias = np.zeros(out_features)
        self.grads = {"weight": np.zeros_like(self.weight),
                      "bias": np.zeros_like(self.bias)}
        self._x = None

    def _array_attrs(self):
        return ("weight", "bias")

    def parameters(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def forward(self, x):
        self._x = x
        return dense_forward(self, x)

    def backward(self, grad_out):
        gx, gw, gb = dense_backward(self, self._x, grad_out)
        self.grads["weight"] += gw
        self.grads["bias"] += gb
        return gx

    def __repr__(self):
        return f"Dense({self.in_features}, {self.out_features})"


class SegmentPool(Module):
    """Average (B, C, L) over ``segments`` contiguous length segments -> (B, C, P).

    ``segments=1`` is global average pooling.
    """

    def __init__(self, length: int, segments: int):
        if not 1 <= segments <= length:
            raise ValueError(f"segments must be in [1, {length}], got {segments}")
        self.length = length
        self.segments = segments
        self.matrix = segment_matrix(length, segments)

    def _array_attrs(self):
        return ("matrix",)

    def forward(self, x):
        if x.shape[-1] != self.length:
            raise ValueError(f"expected length {self.length}, got {x.shape[-1]}")
        return x @ self.matrix

    def backward(self, grad_out):
        return grad_out @ self.matrix.T

    def __repr__(self):
        return f"SegmentPool({self.length} -> {self.segments})"


class Flatten(Module):
    def __init__(self):
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._shape)

    def __repr__(self):
        return "Flatten()"


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers: List[Module] = list(layers)

    def children(self):
        return iter(self.layers)

    def _child_by_name(self, name):
        return self.layers[int(name)]

    def parameters(self):
        for i, layer in enumerate(self.layers):
            for name, p in layer.parameters():
                yield f"{i}.{name}", p

    def buffers(self):
        for i, layer in enumerate(self.layers):
            for name, b in layer.buffers():
                yield f"{i}.{name}", b

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def __repr__(self):
        inner = ",\n  ".join(repr(l) for l in self.layers)
        return f"Sequential(\n  {inner}\n)"


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

# Gradients whose magnitude is below this are compared in absolute terms;
# central differences carry roundoff of order eps * |f| / h ~ 1e-10 there.
GRAD_FLOOR = 1e-5


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0),
                GRAD_FLOOR)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def _numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float) -> np.ndarray:
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def grad_check(module: Module, x: np.ndarray, h: float = 1e-6,
               seed: int = 0, detail: bool = False):
    """Worst normwise relative error between backward() and central differences.

    The scalar probed is ``sum(r * module.forward(x))`` for a fixed random
    projection ``r``.  Every parameter tensor and the input are checked; the
    error for each is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``,
    with the denominator floored at ``GRAD_FLOOR`` so identically-zero
    gradients (e.g. a conv bias feeding batch norm) are not divided by noise.
    Runs in double precision regardless of the module's dtype.
    """
    module.astype(np.float64)
    x = np.array(x, dtype=np.float64)
    out = module.forward(x)
    r = np.random.default_rng(seed).standard_normal(out.shape)
    module.zero_grad()
    grad_x = module.backward(r)
    analytic = dict(module.gradients())
    analytic = {k: v.copy() for k, v in analytic.items()}

    def f():
        return float(np.sum(r * module.forward(x)))

    errors: Dict[str, float] = {"input": _rel_err(grad_x, _numeric_grad(f, x, h))}
    for name, p in module.parameters():
        errors[name] = _rel_err(analytic[name], _numeric_grad(f, p, h))
    worst = max(errors.values())
    return (worst, errors) if detail else worst

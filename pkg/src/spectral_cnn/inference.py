"""Single-shot feed-forward path for trained denoisers.

Training code keeps activations as ``(batch, channels, length)`` so that the
backward pass can reuse them.  For deployment the network is frozen, so this
module folds every batch-norm into the preceding convolution and runs each layer
as one ``(length, k*C_in) @ (k*C_in, C_out)`` product on channels-last buffers
that are allocated once and reused across shots.
"""

from __future__ import annotations

from typing import List, Tuple

import numpy as np
from scipy.linalg.blas import get_blas_funcs

from .models import PreprocNet
from .nn import BatchNorm1d, Conv1d, ReLU

__all__ = ["FrozenDenoiser", "fold_layers"]


def fold_layers(net: PreprocNet) -> List[Tuple[np.ndarray, np.ndarray, bool]]:
    """Collapse the denoiser into ``(weight, bias, relu)`` conv stages.

    ``weight`` has shape ``(C_out, C_in, k)``.  A conv followed by an eval-mode
    batch-norm becomes one conv with per-channel scale and shift.
    """
    layers = net.body.layers
    stages = []
    i = 0
    while i < len(layers):
        conv = layers[i]
        if not isinstance(conv, Conv1d):
            raise TypeError(f"unexpected layer {conv!r} at position {i}")
        w = conv.weight.astype(np.float64)
        b = (conv.bias.astype(np.float64) if conv.bias is not None
             else np.zeros(conv.out_channels))
        i += 1
        if i < len(layers) and isinstance(layers[i], BatchNorm1d):
            bn = layers[i]
            scale = bn.gamma / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
            w = w * scale[:, None, None]
            b = (b - bn.running_mean) * scale + bn.beta
            i += 1
        relu = i < len(layers) and isinstance(layers[i], ReLU)
        if relu:
            i += 1
        stages.append((w, b, relu))
    return stages


class FrozenDenoiser:
    """Inference-only copy of a :class:`PreprocNet` for one shot at a time.

    ``dtype`` defaults to single precision.  The result matches
    ``net.eval().denoise`` up to floating-point reassociation.
    """

    def __init__(self, net: PreprocNet, dtype=np.float32):
        self.config = net.config
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.float32, np.float64):
            raise ValueError("dtype must be float32 or float64")
        self._gemm = get_blas_funcs("gemm", dtype=self.dtype)
        n, k = net.config.input_length, net.config.kernel_size
        self.pad = k // 2
        self.kernel_size = k
        self.stages = []
        self._bufs = {}
        for idx, (w, b, relu) in enumerate(fold_layers(net)):
            c_out, c_in, _ = w.shape
            taps = [np.asfortranarray(w[:, :, t], dtype=self.dtype) for t in range(k)]
            self.stages.append((taps, b.astype(self.dtype)[:, None], relu, c_in, c_out))
            # ping-pong output buffers per width; padding rows stay zero
            for parity in (0, 1):
                self._bufs.setdefault((parity, c_out),
                                      np.zeros((n + 2 * self.pad, c_out), dtype=self.dtype))
        self._input = np.zeros((n + 2 * self.pad, 1), dtype=self.dtype)

    def residual(self, y) -> np.ndarray:
        """Predicted corruption ``R(y)`` for a single spectrum of length N."""
        y = np.asarray(y)
        n = self.config.input_length
        if y.shape != (n,):
            raise ValueError(f"expected one spectrum of length {n}, got shape {y.shape}")
        p = self.pad
        src = self._input
        src[p:p + n, 0] = y
        for idx, (taps, b, relu, c_in, c_out) in enumerate(self.stages):
            dst = self._bufs[(idx % 2, c_out)]
            # dst rows are contiguous, so its transpose is a Fortran-ordered
            # (c_out, n) matrix that gemm can accumulate into in place
            c = dst[p:p + n].T
            c[...] = b
            for t, wt in enumerate(taps):
                self._gemm(1.0, wt, src[t:t + n].T, beta=1.0, c=c, overwrite_c=1)
            if relu:
                np.maximum(c, 0, out=c)
            src = dst
        return src[p:p + n, 0].copy()

    def __call__(self, y) -> np.ndarray:
        """Denoised spectrum ``y - R(y)``."""
        y = np.asarray(y, dtype=self.dtype)
        return y - self.residual(y)

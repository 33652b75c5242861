"""The three spectral networks: residual denoiser, per-element head, end-to-end."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .nn import (BatchNorm1d, Conv1d, Dense, Flatten, Module, ReLU, SegmentPool,
                 Sequential, check_finite)

__all__ = [
    "OXIDES",
    "NetConfig",
    "PreprocNet",
    "CalibHead",
    "EndToEndNet",
    "param_count",
    "flatten_params",
    "load_params",
    "analytic_param_count",
]

OXIDES = ("SiO2", "TiO2", "Al2O3", "FeOT", "MgO", "CaO", "Na2O", "K2O")


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters shared by all three networks.

    ``depth`` counts every convolution in the denoiser (first, body, last), so
    the receptive field is ``depth * (kernel_size - 1) + 1``.
    """

    input_length: int
    depth: int = 20
    width: int = 64
    kernel_size: int = 3
    num_elements: int = 8
    head_channels: int = 4
    head_hidden: int = 16
    head_segments: int = 64
    element_names: Tuple[str, ...] = field(default=OXIDES)

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        for name in ("input_length", "width", "num_elements", "head_channels",
                     "head_hidden", "head_segments"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd int")
        names = tuple(self.element_names)
        if len(names) != self.num_elements:
            if self.element_names == OXIDES:
                names = tuple(f"E{i}" for i in range(self.num_elements))
            else:
                raise ValueError(
                    f"{len(names)} element names for {self.num_elements} elements")
        object.__setattr__(self, "element_names", names)

    @property
    def receptive_field(self) -> int:
        return self.depth * (self.kernel_size - 1) + 1

    @property
    def segments(self) -> int:
        return min(self.head_segments, self.input_length)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["element_names"] = list(self.element_names)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        if "element_names" in kw:
            kw["element_names"] = tuple(kw["element_names"])
        return cls(**kw)


class _Container(Module):
    """Module composed of named children; parameter names are dotted paths."""

    _child_names: Tuple[str, ...] = ()

    def children(self):
        return (getattr(self, n) for n in self._child_names)

    def _child_by_name(self, name):
        return getattr(self, name)

    def parameters(self):
        for n in self._child_names:
            for name, p in getattr(self, n).parameters():
                yield f"{n}.{name}", p

    def buffers(self):
        for n in self._child_names:
            for name, b in getattr(self, n).buffers():
                yield f"{n}.{name}", b

    @property
    def dtype(self):
        return next(self.parameters())[1].dtype


def _check_batch(y: np.ndarray, length: int, dtype) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 1:
        y = y[None, :]
    if y.ndim != 2 or y.shape[1] != length:
        raise ValueError(f"expected spectra of length {length}, got shape {y.shape}")
    return y.astype(dtype, copy=False)


class PreprocNet(_Container):
    """Residual denoiser: predicts the corruption ``z_hat`` and returns ``y - z_hat``.

    first conv (1 -> width, bias) + ReLU, ``depth - 2`` blocks of
    conv (width -> width, no bias) + BN + ReLU, last conv (width -> 1, bias).
    """

    _child_names = ("body",)

    def __init__(self, config: NetConfig, rng: Optional[np.random.Generator] = None):
        rng = np.random.default_rng() if rng is None else rng
        self.config = config
        k, w = config.kernel_size, config.width
        layers: List[Module] = [Conv1d(1, w, k, bias=True, rng=rng), ReLU()]
        for _ in range(config.depth - 2):
            layers += [Conv1d(w, w, k, bias=False, rng=rng), BatchNorm1d(w), ReLU()]
        layers.append(Conv1d(w, 1, k, bias=True, rng=rng))
        self.body = Sequential(*layers)

    @property
    def last(self) -> Conv1d:
        return self.body.layers[-1]

    def forward(self, y):
        """Return ``(z_hat, x_hat)`` for a ``(batch, N)`` array of spectra."""
        y = _check_batch(y, self.config.input_length, self.dtype)
        z_hat = check_finite(self.body.forward(y[:, None, :])[:, 0, :], "denoiser output")
        return z_hat, y - z_hat

    def backward(self, grad_z_hat=None, grad_x_hat=None):
        """Backpropagate upstream gradients on ``z_hat`` and/or ``x_hat``.

        Returns the gradient with respect to the input ``y``.
        """
        if grad_z_hat is None and grad_x_hat is None:
            raise ValueError("need at least one upstream gradient")
        g = np.zeros_like(grad_x_hat if grad_z_hat is None else grad_z_hat)
        if grad_z_hat is not None:
            g = g + grad_z_hat
        if grad_x_hat is not None:
            g = g - grad_x_hat
        grad_y = self.body.backward(g[:, None, :])[:, 0, :]
        if grad_x_hat is not None:
            grad_y = grad_y + grad_x_hat
        return check_finite(grad_y, "denoiser input gradient")

    def denoise(self, y) -> np.ndarray:
        return self.forward(y)[1]


class CalibHead(_Container):
    """``num_elements`` independent regression branches, one per oxide.

    Each branch: conv (1 -> head_channels) + ReLU, segment-average pooling
    into ``segments`` wavelength blocks, dense -> head_hidden, ReLU, dense -> 1.
    Raw branch outputs pass through a fixed affine map
    ``output_scale * out + output_offset`` (identity by default) so training
    can work in standardized units while predictions stay in oxide wt.%.
    """

    def __init__(self, config: NetConfig, rng: Optional[np.random.Generator] = None):
        rng = np.random.default_rng() if rng is None else rng
        self.config = config
        n, c = config.input_length, config.head_channels
        seg = config.segments
        self.branches = []
        for _ in range(config.num_elements):
            self.branches.append(Sequential(
                Conv1d(1, c, config.kernel_size, bias=True, rng=rng),
                ReLU(),
                SegmentPool(n, seg),
                Flatten(),
                Dense(c * seg, config.head_hidden, rng=rng),
                ReLU(),
                Dense(config.head_hidden, 1, rng=rng),
            ))
        self._child_names = tuple(f"branch{i}" for i in range(config.num_elements))
        for name, b in zip(self._child_names, self.branches):
            setattr(self, name, b)
        self.output_scale = np.ones(config.num_elements)
        self.output_offset = np.zeros(config.num_elements)

    def _array_attrs(self):
        return ("output_scale", "output_offset")

    def buffers(self):
        yield from super().buffers()
        yield "output_scale", self.output_scale
        yield "output_offset", self.output_offset

    def forward(self, x) -> np.ndarray:
        x = _check_batch(x, self.config.input_length, self.dtype)
        x3 = x[:, None, :]
        raw = np.concatenate([b.forward(x3) for b in self.branches], axis=1)
        return check_finite(raw * self.output_scale + self.output_offset, "head output")

    def backward(self, grad_v) -> np.ndarray:
        grad_raw = grad_v * self.output_scale
        grad_x = None
        for k, b in enumerate(self.branches):
            g = b.backward(grad_raw[:, k:k + 1])[:, 0, :]
            grad_x = g if grad_x is None else grad_x + g
        return check_finite(grad_x, "head input gradient")

    def set_output_affine(self, offset, scale):
        offset = np.asarray(offset, dtype=self.output_offset.dtype)
        scale = np.asarray(scale, dtype=self.output_scale.dtype)
        if offset.shape != self.output_offset.shape or scale.shape != self.output_scale.shape:
            raise ValueError("output affine must have one entry per element")
        if not np.all(scale > 0):
            raise ValueError("output scale must be positive")
        self.output_offset = offset.copy()
        self.output_scale = scale.copy()


class EndToEndNet(_Container):
    """Denoiser trunk followed by the calibration head, trained jointly."""

    _child_names = ("trunk", "head")

    def __init__(self, config: NetConfig, rng: Optional[np.random.Generator] = None,
                 trunk: Optional[PreprocNet] = None, head: Optional[CalibHead] = None):
        rng = np.random.default_rng() if rng is None else rng
        self.config = config
        self.trunk = trunk if trunk is not None else PreprocNet(config, rng)
        self.head = head if head is not None else CalibHead(config, rng)

    def forward(self, y) -> np.ndarray:
        _, x_hat = self.trunk.forward(y)
        return self.head.forward(x_hat)

    def backward(self, grad_v) -> np.ndarray:
        grad_x_hat = self.head.backward(grad_v)
        return self.trunk.backward(grad_x_hat=grad_x_hat)


def param_count(net: Module) -> int:
    return int(sum(p.size for _, p in net.parameters()))


def flatten_params(net: Module) -> np.ndarray:
    return np.concatenate([p.ravel() for _, p in net.parameters()])


def load_params(net: Module, vector) -> None:
    vector = np.asarray(vector)
    expected = param_count(net)
    if vector.ndim != 1 or vector.size != expected:
        raise ValueError(f"parameter vector has {vector.size} entries, expected {expected}")
    offset = 0
    for _, p in net.parameters():
        p[...] = vector[offset:offset + p.size].reshape(p.shape)
        offset += p.size


def analytic_param_count(config: NetConfig, kind: str = "preproc") -> int:
    """Trainable parameter count computed from layer shapes alone."""
    k, w, d = config.kernel_size, config.width, config.depth
    preproc = (w * k + w) + (d - 2) * (w * w * k + 2 * w) + (w * k + 1)
    c, h, s = config.head_channels, config.head_hidden, config.segments
    branch = (c * k + c) + (c * s * h + h) + (h + 1)
    head = config.num_elements * branch
    return {"preproc": preproc, "calib": head, "e2e": preproc + head}[kind]

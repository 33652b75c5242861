"""Losses, the Adam optimizer and the three training loops.

All three losses are the batch mean of the *unsquared* Euclidean norm of the
per-sample error vector:

* denoiser:     mean_m || (y_m - x_m) - R(y_m) ||
* calibration:  mean_m || v_m - F(x_m) ||
* end-to-end:   mean_m || v_m - F'(y_m) ||

At exactly zero error the norm is not differentiable; the subgradient used
there is the zero vector.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ._random import substream
from .models import CalibHead, EndToEndNet, PreprocNet
from .nn import Module, NonFiniteError

__all__ = [
    "AdamState",
    "Adam",
    "adam_step",
    "TrainConfig",
    "FitResult",
    "l2_norm_loss",
    "loss_preproc",
    "loss_calib",
    "loss_e2e",
    "value_and_grad",
    "fit_preproc",
    "fit_calib",
    "fit_e2e",
    "write_trace",
]

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def l2_norm_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean per-sample l2 norm of ``target - pred`` and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.ndim != 2 or pred.shape[0] == 0:
        raise ValueError("empty batch")
    err = target - pred
    norms = np.linalg.norm(err, axis=1)
    m = pred.shape[0]
    safe = np.where(norms > 0, norms, 1.0)
    grad = np.where((norms > 0)[:, None], -err / (m * safe[:, None]), 0.0)
    return float(norms.mean()), grad.astype(pred.dtype, copy=False)


def _as_batch(a, dtype) -> np.ndarray:
    a = np.asarray(a, dtype=dtype)
    return a[None, :] if a.ndim == 1 else a


def loss_preproc(net: PreprocNet, y, x) -> float:
    y, x = _as_batch(y, net.dtype), _as_batch(x, net.dtype)
    z_hat, _ = net.forward(y)
    return l2_norm_loss(z_hat, y - x)[0]


def loss_calib(head: CalibHead, x, v) -> float:
    x, v = _as_batch(x, head.dtype), _as_batch(v, head.dtype)
    return l2_norm_loss(head.forward(x), v)[0]


def loss_e2e(net: EndToEndNet, y, v) -> float:
    y, v = _as_batch(y, net.dtype), _as_batch(v, net.dtype)
    return l2_norm_loss(net.forward(y), v)[0]


def value_and_grad(net: Module, inputs, targets) -> Tuple[float, np.ndarray]:
    """Loss of ``net`` on one batch; parameter gradients land in ``net``'s buffers.

    The loss form is chosen from the network type.  Returns ``(loss, grad_input)``.
    """
    inputs = _as_batch(inputs, net.dtype)
    targets = _as_batch(targets, net.dtype)
    net.zero_grad()
    if isinstance(net, PreprocNet):
        z_hat, _ = net.forward(inputs)
        loss, g = l2_norm_loss(z_hat, inputs - targets)
        # the residual target y - x also depends on y
        grad_in = net.backward(grad_z_hat=g) - g
    elif isinstance(net, (CalibHead, EndToEndNet)):
        loss, g = l2_norm_loss(net.forward(inputs), targets)
        grad_in = net.backward(g)
    else:
        raise TypeError(f"unsupported network type {type(net).__name__}")
    return loss, grad_in


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected Adam moments; ``t`` counts completed steps."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")


def adam_step(state: AdamState, params: Sequence[np.ndarray],
              grads: Sequence[np.ndarray], names: Optional[Sequence[str]] = None):
    """One Adam update, applied to ``params`` in place and returned.

    Raises :class:`NonFiniteError` naming the flat parameter index of the first
    non-finite gradient entry.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    offset = 0
    for i, g in enumerate(grads):
        bad = ~np.isfinite(g)
        if bad.any():
            j = int(np.flatnonzero(bad.ravel())[0])
            label = f" ({names[i]})" if names is not None else ""
            raise NonFiniteError(
                f"non-finite gradient at parameter index {offset + j}{label}")
        offset += g.size
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.lr:
            p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


class Adam:
    """Adam bound to a module's parameters."""

    def __init__(self, net: Module, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.net = net
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        names, params = zip(*self.net.parameters())
        grads = [g for _, g in self.net.gradients()]
        adam_step(self.state, params, grads, names)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 20
    lr: float = 1e-3
    seed: Optional[int] = 0
    shuffle: bool = True
    precision: str = "double"

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs batch statistics)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64


@dataclass
class FitResult:
    net: Module
    trace: List[Tuple[int, str, float]] = field(default_factory=list)

    def losses(self, split: str = "train") -> np.ndarray:
        return np.array([loss for _, s, loss in self.trace if s == split])


def _batches(n: int, batch_size: int, rng, shuffle: bool):
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if idx.size < 2:
            # batch norm cannot use a single-sample batch
            continue
        yield idx


def _eval_loss(net: Module, inputs, targets, batch_size: int = 256) -> float:
    net.eval()
    total = 0.0
    for start in range(0, len(inputs), batch_size):
        sl = slice(start, start + batch_size)
        if isinstance(net, PreprocNet):
            loss = loss_preproc(net, inputs[sl], targets[sl])
        elif isinstance(net, CalibHead):
            loss = loss_calib(net, inputs[sl], targets[sl])
        else:
            loss = loss_e2e(net, inputs[sl], targets[sl])
        total += loss * len(inputs[sl])
    return total / len(inputs)


def _fit(net: Module, inputs, targets, config: TrainConfig, validation=None) -> FitResult:
    inputs = np.asarray(inputs, dtype=config.dtype)
    targets = np.asarray(targets, dtype=config.dtype)
    if inputs.ndim != 2 or len(inputs) == 0:
        raise ValueError("training set is empty")
    if len(inputs) != len(targets):
        raise ValueError(f"{len(inputs)} inputs but {len(targets)} targets")
    if len(inputs) < 2:
        raise ValueError("training set needs at least 2 samples for batch norm")
    net.astype(config.dtype)
    opt = Adam(net, lr=config.lr)
    rng = substream(config.seed, "shuffle")
    result = FitResult(net)
    for epoch in range(config.epochs):
        net.train()
        total, count = 0.0, 0
        for b, idx in enumerate(_batches(len(inputs), config.batch_size, rng, config.shuffle)):
            loss, _ = value_and_grad(net, inputs[idx], targets[idx])
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch} batch {b}")
            opt.step()
            total += loss * idx.size
            count += idx.size
        result.trace.append((epoch, "train", total / count))
        if validation is not None:
            result.trace.append((epoch, "val", _eval_loss(net, *validation)))
        logger.info("epoch %d train loss %.6g", epoch, total / count)
    net.eval()
    return result


def fit_preproc(net: PreprocNet, raw, clean, config: TrainConfig = None,
                validation=None) -> FitResult:
    """Train the denoiser on ``(raw, clean)`` pairs."""
    return _fit(net, raw, clean, config or TrainConfig(), validation)


def _standardize_head(head: CalibHead, compositions) -> None:
    v = np.asarray(compositions, dtype=np.float64)
    scale = v.std(axis=0)
    head.set_output_affine(v.mean(axis=0), np.where(scale > 0, scale, 1.0))


def fit_calib(head: CalibHead, clean, compositions, config: TrainConfig = None,
              validation=None, standardize_targets: bool = True) -> FitResult:
    """Train the calibration head on ``(preprocessed spectrum, composition)`` pairs.

    With ``standardize_targets`` the head's fixed output affine is set to the
    training mean and standard deviation before optimization.  The loss is
    still measured in oxide wt.%.
    """
    if standardize_targets:
        _standardize_head(head, compositions)
    return _fit(head, clean, compositions, config or TrainConfig(), validation)


def fit_e2e(net: EndToEndNet, raw, compositions, config: TrainConfig = None,
            validation=None, standardize_targets: bool = True) -> FitResult:
    """Train denoiser and head jointly from raw spectra to compositions."""
    if standardize_targets:
        _standardize_head(net.head, compositions)
    return _fit(net, raw, compositions, config or TrainConfig(), validation)


def write_trace(trace, path) -> None:
    """Write a loss trace as CSV ``epoch,split,loss``."""
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "split", "loss"])
        for epoch, split, loss in trace:
            w.writerow([epoch, split, repr(float(loss))])

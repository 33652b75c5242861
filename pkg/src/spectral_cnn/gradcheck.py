"""Finite-difference verification suite for layers, networks and losses.

Every check runs in double precision on tiny random instances (batch 2, at most
4 channels, length at most 32, denoiser depth 3).
"""

from __future__ import annotations

from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from ._random import substream
from .models import CalibHead, EndToEndNet, NetConfig, PreprocNet
from .nn import (BatchNorm1d, Conv1d, Dense, Flatten, Module, ReLU, SegmentPool,
                 Sequential, _numeric_grad, _rel_err, grad_check)
from .train import loss_calib, loss_e2e, loss_preproc, value_and_grad

__all__ = ["COMPONENTS", "TOLERANCE", "loss_grad_check", "run_suite"]

TOLERANCE = 1e-4
COMPONENTS = ("conv1d", "batchnorm", "relu", "dense", "segment_pool",
              "preproc_net", "calib_head", "loss_preproc", "loss_calib", "loss_e2e")

_LOSSES = {PreprocNet: loss_preproc, CalibHead: loss_calib, EndToEndNet: loss_e2e}


def loss_grad_check(net: Module, inputs, targets, h: float = 1e-6) -> Tuple[float, Dict[str, float]]:
    """Compare ``value_and_grad`` with central differences of the loss.

    Checks the input gradient and every parameter; returns ``(worst, per_tensor)``.
    """
    net.astype(np.float64).train()
    inputs = np.array(inputs, dtype=np.float64)
    targets = np.array(targets, dtype=np.float64)
    loss_fn = _LOSSES[type(net)]
    _, grad_in = value_and_grad(net, inputs, targets)
    analytic = {k: v.copy() for k, v in net.gradients()}

    def f():
        return loss_fn(net, inputs, targets)

    errors = {"input": _rel_err(grad_in, _numeric_grad(f, inputs, h))}
    for name, p in net.parameters():
        errors[name] = _rel_err(analytic[name], _numeric_grad(f, p, h))
    return max(errors.values()), errors


def _away_from_zero(rng, shape):
    # keeps ReLU inputs off the kink so the difference quotient is smooth
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def _tiny_config(length=32):
    return NetConfig(input_length=length, depth=3, width=4, num_elements=3,
                     head_channels=2, head_hidden=4, head_segments=8)


def _check(component: str, rng: np.random.Generator, h: float):
    B, L = 2, 32
    if component == "conv1d":
        m = Conv1d(3, 4, 3, rng=rng)
        return grad_check(m, rng.standard_normal((B, 3, L)), h=h, detail=True)
    if component == "batchnorm":
        m = BatchNorm1d(4)
        m.gamma[:] = rng.uniform(0.5, 1.5, 4)
        m.beta[:] = rng.standard_normal(4)
        return grad_check(m, rng.standard_normal((B, 4, L)), h=h, detail=True)
    if component == "relu":
        return grad_check(ReLU(), _away_from_zero(rng, (B, 4, L)), h=h, detail=True)
    if component == "dense":
        return grad_check(Dense(4, 3, rng=rng), rng.standard_normal((B, 4)), h=h, detail=True)
    if component == "segment_pool":
        m = Sequential(SegmentPool(L, 5), Flatten())
        return grad_check(m, rng.standard_normal((B, 2, L)), h=h, detail=True)
    cfg = _tiny_config(L)
    if component == "preproc_net":
        net = PreprocNet(cfg, rng).train()
        return grad_check(_ResidualProbe(net), rng.standard_normal((B, L)), h=h, detail=True)
    if component == "calib_head":
        head = CalibHead(cfg, rng).train()
        return grad_check(head, rng.standard_normal((B, L)), h=h, detail=True)
    if component == "loss_preproc":
        net = PreprocNet(cfg, rng)
        y = rng.standard_normal((B, L))
        return loss_grad_check(net, y, y - 0.3 * rng.standard_normal((B, L)), h=h)
    if component == "loss_calib":
        head = CalibHead(cfg, rng)
        return loss_grad_check(head, rng.standard_normal((B, L)),
                               rng.uniform(0, 50, (B, cfg.num_elements)), h=h)
    if component == "loss_e2e":
        net = EndToEndNet(cfg, rng)
        return loss_grad_check(net, rng.standard_normal((B, L)),
                               rng.uniform(0, 50, (B, cfg.num_elements)), h=h)
    raise ValueError(f"unknown component {component!r}; choose from {COMPONENTS}")


class _ResidualProbe(Module):
    """Adapts PreprocNet's ``(z_hat, x_hat)`` output to the single-output checker."""

    def __init__(self, net: PreprocNet):
        self.net = net

    def children(self):
        yield self.net

    def _child_by_name(self, name):
        return self.net if name == "net" else None

    def parameters(self):
        for name, p in self.net.parameters():
            yield f"net.{name}", p

    def gradients(self):
        for name, g in self.net.gradients():
            yield f"net.{name}", g

    def forward(self, y):
        return self.net.forward(y)[1]

    def backward(self, grad_out):
        return self.net.backward(grad_x_hat=grad_out)


def run_suite(components: Optional[Iterable[str]] = None, seed: int = 0,
              h: float = 1e-6, trials: int = 3) -> List[Tuple[str, float, bool]]:
    """Worst relative error per component over ``trials`` random instances.

    Returns rows ``(component, worst_error, passed)``.
    """
    names = COMPONENTS if components is None else tuple(components)
    rows = []
    for name in names:
        if name not in COMPONENTS:
            raise ValueError(f"unknown component {name!r}; choose from {COMPONENTS}")
        worst = 0.0
        for trial in range(trials):
            err, _ = _check(name, substream(seed, "gradcheck", COMPONENTS.index(name), trial), h)
            worst = max(worst, err)
        rows.append((name, worst, worst < TOLERANCE))
    return rows

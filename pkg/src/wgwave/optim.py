"""Adam with bias correction over named parameter dicts."""

from __future__ import annotations

import numpy as np

from .errors import StateError
from .tensor import Tensor


class AdamState:
    """First/second moment buffers plus a shared step counter.

    Buffers are keyed by parameter name and created lazily on the first
    step so the state can be built before (or after) the model.
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {}
        self.v = {}

    def ensure(self, name, param):
        if name not in self.m:
            self.m[name] = np.zeros_like(param.data)
            self.v[name] = np.zeros_like(param.data)
        elif self.m[name].shape != param.data.shape:
            raise StateError(f"adam: moment shape {self.m[name].shape} vs param {param.data.shape} for {name}")


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float):
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    for name, p in params.items():
        if p.grad is None:
            raise StateError(f"adam_step: parameter {name!r} has no gradient")
        state.ensure(name, p)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)
        p.grad = None


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= np.asarray(factor, dtype=p.grad.dtype)
    return norm

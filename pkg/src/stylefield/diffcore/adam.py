"""Adam optimizer with bias correction over a ParamSet."""

from __future__ import annotations

import numpy as np

from .tensor import DiffcoreError, ParamSet, ShapeError


class AdamState:
    """First/second moments per parameter plus the shared step counter."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: ParamSet, grads: dict, state: AdamState) -> None:
    """One Adam update in place.  Frozen parameters are never touched."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        if not params.trainable(name):
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(
                f"adam_step: gradient shape {g.shape} != parameter shape "
                f"{p.data.shape} for {name!r}"
            )
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def check_finite_loss(value: float) -> None:
    if not np.isfinite(value):
        raise DiffcoreError(f"non-finite loss: {value}")

"""Adam with bias correction, over named parameter arrays."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class AdamState:
    lr: float = 0.01
    beta1: float = 0.99
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.step < 0:
            raise ValueError("step counter must be non-negative")


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update. Returns new parameters and a new state; inputs are untouched.

    Missing accumulators are treated as zeros, so a fresh ``AdamState()``
    works for any parameter set.
    """
    if set(params) != set(grads):
        raise ValueError("parameter and gradient names differ")
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=float)
        p = np.asarray(p, dtype=float)
        if g.shape != p.shape:
            raise ValueError(f"shape mismatch for {name!r}: param {p.shape}, grad {g.shape}")
        m0 = state.m.get(name)
        v0 = state.v.get(name)
        if m0 is None:
            m0 = np.zeros_like(p)
            v0 = np.zeros_like(p)
        elif m0.shape != p.shape:
            raise ValueError(f"accumulator shape mismatch for {name!r}")
        m = state.beta1 * m0 + (1.0 - state.beta1) * g
        v = state.beta2 * v0 + (1.0 - state.beta2) * (g * g)
        new_params[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, replace(state, step=t, m=new_m, v=new_v)

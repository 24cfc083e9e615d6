"""Adamax (infinity-norm Adam) over dicts of numpy arrays."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamaxState:
    first_moment: dict = field(default_factory=dict)
    inf_norm: dict = field(default_factory=dict)
    step_count: int = 0


def adamax_update(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Return updated ``(params, state)``; inputs are left untouched.

    ``eps`` only floors the infinity norm, so the first step of a nonzero
    gradient moves each coordinate by exactly ``lr``.
    """
    t = state.step_count + 1
    new_m, new_u, new_p = {}, {}, {}
    for name, g in grads.items():
        g = np.asarray(g, dtype=float)
        m = state.first_moment.get(name, np.zeros_like(g))
        u = state.inf_norm.get(name, np.zeros_like(g))
        m = beta1 * m + (1 - beta1) * g
        u = np.maximum(beta2 * u, np.abs(g))
        step = (lr / (1 - beta1**t)) * m / np.maximum(u, eps)
        new_m[name], new_u[name] = m, u
        new_p[name] = np.asarray(params[name], dtype=float) - step
    for name in params:
        new_p.setdefault(name, params[name])
    return new_p, AdamaxState(new_m, new_u, t)

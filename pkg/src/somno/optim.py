"""Adam with bias correction and coupled L2 weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# optimizer settings used to pretrain the staging network
DEFAULT_LR = 5e-6
DEFAULT_WEIGHT_DECAY = 1e-8
DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_EPS = 1e-8


@dataclass
class AdamState:
    lr: float = DEFAULT_LR
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    beta1: float = DEFAULT_BETAS[0]
    beta2: float = DEFAULT_BETAS[1]
    eps: float = DEFAULT_EPS
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    """One Adam update. Returns ``(new_params, state)``; ``state`` is updated in place.

    Weight decay enters as ``grad + weight_decay * param`` before the moment
    updates (L2-in-Adam, not the decoupled AdamW form).
    """
    if params.keys() != grads.keys():
        raise ValueError("params and grads must have the same keys")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    new_params = {}
    for name, theta in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(theta):
            raise ValueError(f"shape mismatch for {name!r}: {g.shape} vs {np.shape(theta)}")
        if state.weight_decay:
            g = g + state.weight_decay * theta
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, state

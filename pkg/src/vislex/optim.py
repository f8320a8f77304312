"""Momentum SGD and decoupled-weight-decay Adam, operating on named tensors.

The encoder's conv blocks train with SGD (L2 decay folded into the
gradient); everything else, including the 1x1 projection, heads and
embeddings, trains with AdamW (decay applied directly to the weights,
separate from the adaptive step).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ContractError


@dataclass
class SgdState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(
    params: dict[str, Tensor],
    state: SgdState,
    lr: float,
    wd: float,
    momentum: float = 0.9,
) -> None:
    """Classical momentum SGD; weight decay enters through the gradient."""
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"sgd_step: parameter {name!r} has no gradient")
        g = p.grad + wd * p.data
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v + g
        state.velocity[name] = v
        p.data -= lr * v


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(
    params: dict[str, Tensor],
    state: AdamWState,
    lr: float,
    wd: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """Bias-corrected adaptive step with decoupled weight decay."""
    b1, b2 = betas
    state.t += 1
    t = state.t
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"adamw_step: parameter {name!r} has no gradient")
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        p.data -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * p.data)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None

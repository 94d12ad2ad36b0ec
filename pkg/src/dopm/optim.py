"""Adam optimizer, global-norm gradient clipping, and the step-decay schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamState:
    """Per-parameter first/second moment estimates and the shared step count.

    ``step`` counts completed updates; bias correction uses step + 1
    inside :func:`adam_step`.
    """

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Tensor], beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        state = cls(beta1=beta1, beta2=beta2, eps=eps)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params: list[Tensor], grads: list, state: AdamState, lr: float) -> None:
    """Apply one bias-corrected Adam update in place.

    Gradients may alias each other, so they are only read, never
    written. A ``None`` gradient leaves its parameter untouched but
    still advances that slot's moments with a zero gradient.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads, and state must have matching lengths")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = 0.0
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)


def clip_global_norm(grads: list, max_norm: float) -> float:
    """Scale gradients so their joint 2-norm is at most max_norm.

    Returns the pre-clip norm. Scaling allocates fresh arrays because
    gradients coming out of backward may share storage.
    """
    total = 0.0
    for g in grads:
        if g is not None:
            total += float(np.sum(np.square(g)))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for i, g in enumerate(grads):
            if g is not None:
                grads[i] = g * scale
    return norm


def step_decay_lr(base_lr: float, episode: int, factor: float, period: int) -> float:
    """lr at an episode index under multiply-by-factor-every-period decay."""
    if period <= 0:
        return base_lr
    return base_lr * factor ** (episode // period)

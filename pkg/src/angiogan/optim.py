"""Bias-corrected Adam."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import DTYPE, Tensor


@dataclass
class AdamState:
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def init_for(self, params: Sequence[Tensor]) -> None:
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState) -> None:
    """One Adam update in place on ``params``; a ``None`` gradient counts as zero."""
    if not state.m:
        state.init_for(params)
    if len(state.m) != len(params) or len(grads) != len(params):
        raise ValueError("Adam state, params and grads must have equal length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.m[i].shape != p.shape:
            raise ValueError(f"Adam moment shape {state.m[i].shape} != parameter shape {p.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = (b1 * state.m[i] + (1.0 - b1) * g).astype(DTYPE)
        v = (b2 * state.v[i] + (1.0 - b2) * g * g).astype(DTYPE)
        state.m[i], state.v[i] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(DTYPE)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 0.0002, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        self.state.init_for(self.params)

    def step(self) -> None:
        # fully frozen parameter set: no update and no moment/counter mutation
        if not any(p.requires_grad for p in self.params):
            return
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

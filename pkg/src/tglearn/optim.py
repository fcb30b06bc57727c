"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ParameterError


@dataclass
class AdamWState:
    learning_rate: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ParameterError("learning rate must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ParameterError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ParameterError("weight decay must be non-negative")


def adamw_step(params, grads, state: AdamWState):
    """One in-place AdamW update of the arrays in ``params``.

    ``grads[i]`` may be ``None``; that parameter is left untouched and its
    moments do not advance.
    """
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    if len(params) != len(state.first_moment) or len(grads) != len(params):
        raise DimensionError("parameter list does not match optimizer state")
    state.step_count += 1
    t = state.step_count
    lr, b1, b2 = state.learning_rate, state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} vs parameter {p.shape}")
        if state.weight_decay:
            p *= 1 - lr * state.weight_decay
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


class AdamW:
    """Optimizer over a fixed list of ``Parameter`` objects."""

    def __init__(self, params, lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamWState(lr, weight_decay, betas[0], betas[1], eps)
        self.state.first_moment = [np.zeros_like(p.data) for p in self.params]
        self.state.second_moment = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        arrays = [p.data for p in self.params]
        grads = [p.grad.astype(p.data.dtype, copy=False) if p.grad is not None else None
                 for p in self.params]
        adamw_step(arrays, grads, self.state)

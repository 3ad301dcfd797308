"""Adam with bias correction, operating on lists of parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(ValueError):
    """A gradient contained NaN or +/-inf."""


@dataclass
class AdamState:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)
    _scratch: list = field(default_factory=list, repr=False)


def adam_step(state: AdamState, params, grads):
    """One Adam update in place; returns (params, state) for convenience.

    `params` and `grads` are equally shaped lists of float64 arrays. Moments
    (and scratch buffers, to avoid per-step allocations) are lazily created
    on the first call.
    """
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
        state._scratch = [np.empty_like(p) for p in params]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("gradient contains NaN or inf")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    for p, g, m, v, buf in zip(
        params, grads, state.first_moment, state.second_moment, state._scratch
    ):
        m *= b1
        np.multiply(g, 1.0 - b1, out=buf)
        m += buf
        v *= b2
        np.multiply(g, g, out=buf)
        buf *= 1.0 - b2
        v += buf
        np.divide(v, correction2, out=buf)
        np.sqrt(buf, out=buf)
        buf += state.epsilon
        np.divide(m, buf, out=buf)
        buf *= state.learning_rate / correction1
        p -= buf
    return params, state


class Adam:
    """Thin stateful wrapper over `adam_step` for parameter Tensors."""

    def __init__(self, tensors, learning_rate: float = 3e-4):
        self.tensors = list(tensors)
        self.state = AdamState(learning_rate=learning_rate)

    def step(self):
        grads = [
            t.grad if t.grad is not None else np.zeros_like(t.data) for t in self.tensors
        ]
        adam_step(self.state, [t.data for t in self.tensors], grads)

    def zero_grad(self):
        for t in self.tensors:
            t.zero_grad()

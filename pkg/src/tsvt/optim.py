"""Adam optimizer with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, UsageError


@dataclass
class AdamState:
    """Per-parameter Adam moment buffers and hyperparameters."""

    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)


def adam_step(param: Tensor, state: AdamState) -> None:
    """Apply one bias-corrected Adam update to `param` in place."""
    if param.grad is None:
        raise UsageError("adam_step called on a parameter with no gradient")
    g = param.grad
    if state.m is None:
        state.m = np.zeros_like(param.data)
        state.v = np.zeros_like(param.data)
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    param.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    """Drives adam_step over a named parameter collection."""

    def __init__(self, params: dict[str, Tensor], lr: float = 2e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.states = {
            name: AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
            for name in self.params
        }

    def step(self) -> None:
        for name, p in self.params.items():
            adam_step(p, self.states[name])

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat view of moment buffers for checkpointing."""
        out = {}
        for name, s in self.states.items():
            if s.m is not None:
                out[f"{name}.m"] = s.m
                out[f"{name}.v"] = s.v
        return out

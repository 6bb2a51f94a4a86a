"""AdaBelief on plain numpy parameters."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdaBeliefState:
    m: np.ndarray
    s: np.ndarray
    step: int = 0


def adabelief_update(param: np.ndarray, grad: np.ndarray, state: AdaBeliefState | None, lr: float,
                     eps: float = 1e-16, beta1: float = 0.9, beta2: float = 0.999):
    """One AdaBelief step. Returns ``(new_param, new_state)``; inputs are not mutated.

    m <- b1 m + (1 - b1) g
    s <- b2 s + (1 - b2) (g - m)^2 + eps
    p <- p - lr * m_hat / (sqrt(s_hat) + eps)
    """
    if state is None:
        state = AdaBeliefState(np.zeros_like(param, dtype=np.float64), np.zeros_like(param, dtype=np.float64))
    g = np.asarray(grad, dtype=np.float64)
    m = beta1 * state.m + (1 - beta1) * g
    s = beta2 * state.s + (1 - beta2) * (g - m) ** 2 + eps
    t = state.step + 1
    m_hat = m / (1 - beta1**t)
    s_hat = s / (1 - beta2**t)
    new_param = param - lr * m_hat / (np.sqrt(s_hat) + eps)
    return new_param.astype(param.dtype, copy=False), AdaBeliefState(m, s, t)


@dataclass
class OptimizerState:
    """Per-parameter AdaBelief accumulators keyed by parameter name."""

    eps: float = 1e-16
    beta1: float = 0.9
    beta2: float = 0.999
    slots: dict[str, AdaBeliefState] = field(default_factory=dict)

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        new_param, self.slots[name] = adabelief_update(
            param, grad, self.slots.get(name), lr, self.eps, self.beta1, self.beta2
        )
        return new_param

"""Adam optimizer and Kaiming-uniform initialization, both deterministic."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .rng import Rng


def kaiming_uniform_init(shape, fan_in: int, rng: Rng) -> Tensor:
    """I.i.d. uniform on [-sqrt(6/fan_in), +sqrt(6/fan_in)].

    The bound is gain * sqrt(3 / fan_in) with gain = sqrt(2), the standard
    choice for ReLU layers.
    """
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(value: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state``, returns the new value."""
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    return value - lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a named parameter dict; parameters with no grad are skipped."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {
            name: AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
            for name, p in params.items()
        }

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            p.data = adam_step(p.data, p.grad, self.state[name], self.lr,
                               self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

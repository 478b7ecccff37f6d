"""RMSProp with per-parameter squared-gradient accumulators."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import Parameter


@dataclass
class RMSPropState:
    lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if self.eps <= 0 or self.lr < 0:
            raise ValueError("eps must be > 0 and lr >= 0")


def rmsprop_step(params: Iterable[Parameter], state: RMSPropState) -> None:
    """One in-place update using each parameter's current ``grad``.

    s <- rho*s + (1-rho)*g^2;  theta <- theta - lr*g/(sqrt(s)+eps)
    """
    for p in params:
        g = p.grad
        s = state.accumulators.get(p.name)
        if s is None:
            s = np.zeros_like(p.data)
        elif s.shape != p.shape:
            raise ValueError(f"accumulator for {p.name!r} has shape {s.shape}, parameter {p.shape}")
        s = state.rho * s + (1.0 - state.rho) * g * g
        state.accumulators[p.name] = s
        if state.lr:
            p.data = p.data - state.lr * g / (np.sqrt(s) + state.eps)


class RMSProp:
    """Optimizer bound to a fixed parameter list. Parameter names must be unique."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3, rho: float = 0.9,
                 eps: float = 1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique for the optimizer state")
        self.state = RMSPropState(lr=lr, rho=rho, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        rmsprop_step(self.params, self.state)

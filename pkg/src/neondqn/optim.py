"""RMSprop, written out by hand."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class RmspropState:
    learning_rate: float = 1e-3
    rho: float = 0.99
    eps: float = 1e-8
    square_avg: dict = field(default_factory=dict)


def rmsprop_step(params, grads, state):
    """Apply one RMSprop update in place.

    ``params`` and ``grads`` are name -> ndarray mappings. Parameters whose
    gradient is missing are left alone.

        v     <- rho * v + (1 - rho) * g**2
        theta <- theta - lr * g / (sqrt(v) + eps)
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        v = state.square_avg.get(name)
        if v is None:
            v = np.zeros_like(p)
            state.square_avg[name] = v
        v *= state.rho
        v += (1.0 - state.rho) * g * g
        p -= state.learning_rate * g / (np.sqrt(v) + state.eps)
    return params


class RMSprop:
    """Optimizer over a fixed list of named parameter tensors."""

    def __init__(self, named_params, lr=1e-3, rho=0.99, eps=1e-8):
        self.named_params = dict(named_params)
        self.state = RmspropState(learning_rate=lr, rho=rho, eps=eps)

    def zero_grad(self):
        for t in self.named_params.values():
            t.grad = None

    def step(self):
        params = {k: t.data for k, t in self.named_params.items()}
        grads = {k: t.grad for k, t in self.named_params.items() if t.grad is not None}
        rmsprop_step(params, grads, self.state)

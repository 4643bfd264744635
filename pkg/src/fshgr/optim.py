"""Adam optimizer with bias correction."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .tensor import Tensor

__all__ = ["adam_step", "Adam"]


def adam_step(params, grads, state, t, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """Apply one Adam update in place.

    Args:
        params: list of arrays to update.
        grads: list of gradients (None entries are skipped).
        state: dict with lists ``m`` and ``v`` of first/second moment arrays,
            updated in place.
        t: 1-based step count used for bias correction.

    Returns:
        ``params`` and ``state`` (the same objects, for convenience).
    """
    if t < 1:
        raise ValueError(f"adam_step: t must be >= 1, got {t}")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m, v = state["m"][i], state["v"][i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p -= step.astype(p.dtype, copy=False)
    return params, state


class Adam:
    """Stateful wrapper around :func:`adam_step` for a named parameter set."""

    def __init__(self, params: Mapping[str, Tensor], lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.state = {
            "m": [np.zeros_like(p.data) for p in self.params.values()],
            "v": [np.zeros_like(p.data) for p in self.params.values()],
        }

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        adam_step(
            [p.data for p in self.params.values()],
            [p.grad for p in self.params.values()],
            self.state,
            self.t,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
        )

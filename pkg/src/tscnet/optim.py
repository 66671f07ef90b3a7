"""SGD with Nesterov momentum and masked weight decay."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def sgd_nesterov_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    state: list[np.ndarray | None],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    decay_mask: Sequence[bool] | None = None,
) -> None:
    """Update ``params`` in place.

    With ``g = grad + wd * p`` (decay only where the mask is set)::

        v <- momentum * v + g
        p <- p - lr * (g + momentum * v)

    ``state`` holds one velocity per parameter (``None`` until first use).
    """
    if decay_mask is None:
        decay_mask = [True] * len(params)
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if weight_decay and decay_mask[i]:
            g = g + weight_decay * p
        v = state[i]
        v = g.copy() if v is None else momentum * v + g
        state[i] = v
        p -= lr * (g + momentum * v)


class SGD:
    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0, decay_mask=None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_mask = list(decay_mask) if decay_mask is not None else [True] * len(self.params)
        self.state: list[np.ndarray | None] = [None] * len(self.params)

    def step(self) -> None:
        sgd_nesterov_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.state,
            self.lr,
            self.momentum,
            self.weight_decay,
            self.decay_mask,
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

"""
Adam optimizer and global-norm gradient clipping over a ParameterStore.
"""

from typing import Dict, Optional, Tuple

import numpy as np

from agents.driver.networks import ParameterStore

Gradients = Dict[str, np.ndarray]


def global_norm(grads: Gradients) -> float:
    """sqrt of the summed squares of every gradient entry"""
    return float(np.sqrt(sum(float(np.sum(g * g)) for _, g in sorted(grads.items()))))


def clip_by_global_norm(grads: Gradients, max_norm: Optional[float]) -> Tuple[Gradients, float]:
    """
    Rescale gradients so their joint norm is at most max_norm.

    Returns:
        (clipped gradients, norm before clipping)
    """
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


class Adam:
    """Adaptive moment estimation with bias correction"""

    def __init__(
        self, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
    ):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Gradients = {}
        self.v: Gradients = {}

    def step(self, params: ParameterStore, grads: Gradients) -> None:
        """Update params in place; parameters without a gradient are left alone"""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in params.names():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            params[name] = params[name] - update

"""Adam."""
from dataclasses import dataclass, field

import numpy as np


class OptimizerError(ValueError):
    pass


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, t=None):
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``params`` and ``grads`` map names to arrays; names without a gradient
    are left untouched. ``t`` is the 1-based step index (defaults to
    ``state.t + 1``). Returns ``(params, state)``.
    """
    t = state.t + 1 if t is None else t
    if t < 1:
        raise OptimizerError(f"step index must be >= 1, got {t}")
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        if g.shape != p.shape:
            raise OptimizerError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape:
            raise OptimizerError(f"optimizer state for {name} has shape {m.shape}, parameter {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
        state.m[name], state.v[name] = m, v
    state.t = t
    return params, state


class Adam:
    """Adam over a name -> Tensor mapping, reading ``Tensor.grad``."""

    def __init__(self, tensors, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = dict(tensors)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self):
        params = {n: t.data for n, t in self.tensors.items()}
        grads = {n: t.grad for n, t in self.tensors.items() if t.grad is not None}
        adam_step(params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

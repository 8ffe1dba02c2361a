"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, get_tape


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place.

    Only names present in ``grads`` are touched; moments for a parameter are
    created lazily on its first gradient.
    """
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.data.shape}")
        m = state.m.get(name)
        if m is not None and m.shape != p.data.shape:
            raise ValueError(f"Adam state for {name!r} has shape {m.shape}, parameter has {p.data.shape}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype, copy=False)


class Adam:
    """Optimizer over a name -> Tensor mapping.

    ``step()`` consumes ``.grad`` of every parameter, resets it and clears the
    tape so the next forward pass starts fresh.
    """

    def __init__(self, params: dict[str, Tensor], lr=1e-4, beta1=0.9, beta2=0.98, eps=1e-8, clip_norm=None):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        self.clip_norm = clip_norm

    def step(self) -> None:
        grads = {n: p.grad for n, p in self.params.items() if p.requires_grad and p.grad is not None}
        if self.clip_norm:
            total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / (total + 1e-6)
                grads = {n: g * np.asarray(scale, dtype=g.dtype) for n, g in grads.items()}
        if grads:
            adam_step(self.params, grads, self.state)
        self.zero_grad()
        get_tape().clear()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

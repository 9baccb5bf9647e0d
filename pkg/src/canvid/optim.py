"""Adam with bias correction, plus the linear warmup schedule used for training."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class OptState:
    """Per-parameter Adam moment accumulators and hyperparameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], lr: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.95, eps: float = 1e-8) -> "OptState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptState,
              lr: float | None = None) -> None:
    """One bias-corrected Adam update; increments the step counter.

    `lr` overrides the stored learning rate for this step (used for warmup).
    """
    if state.step < 0:
        raise ValueError("optimizer step counter must be >= 0")
    t = state.step + 1
    step_lr = state.lr if lr is None else lr
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for '{name}': {g.shape} vs {p.data.shape}")
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        update = step_lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.assign(p.data - update)
    state.step = t


def warmup_lr(base_lr: float, step: int, warmup_steps: int = 200) -> float:
    """Linear ramp from base_lr/warmup_steps up to base_lr."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup_steps)


def grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    return float(np.sqrt(total))

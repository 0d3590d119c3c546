from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, Tensor


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if lr_min > lr_max:
        raise ValueError(f"lr_min {lr_min} exceeds lr_max {lr_max}")
    if total_steps == 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimizerState:
    total_steps: int
    lr_max: float = 1e-3
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("lr_max", "beta1", "beta2", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.lr_min < 0:
            raise ValueError("weight_decay and lr_min must be non-negative")

    def current_lr(self) -> float:
        return cosine_lr(min(self.step, self.total_steps), self.total_steps, self.lr_max, self.lr_min)


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    norm = global_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState) -> float:
    """One decoupled-weight-decay Adam update; returns the learning rate used.

    Parameters without an entry in ``grads`` see a zero gradient.  A non-finite
    gradient rejects the whole update and leaves params and state untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter {name!r} shape {params[name].shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name!r}; update rejected at step {state.step}")

    lr = state.current_lr()
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    state.step = t
    return lr


class AdamW:
    """Thin stateful wrapper: collects ``.grad`` from params, clips, steps."""

    def __init__(self, params: dict[str, Tensor], total_steps: int, lr: float = 1e-3, lr_min: float = 0.0,
                 weight_decay: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8, clip_norm: float | None = 1.0):
        self.params = params
        self.clip_norm = clip_norm
        self.state = OptimizerState(total_steps=total_steps, lr_max=lr, lr_min=lr_min, beta1=betas[0],
                                    beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        if self.clip_norm is not None:
            clip_grads(grads, self.clip_norm)
        return adamw_step(self.params, grads, self.state)

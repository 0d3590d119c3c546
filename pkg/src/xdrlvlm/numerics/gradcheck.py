from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, backward

# relative error uses max(|analytic|, |numeric|, GRAD_FLOOR) as denominator so that
# coordinates whose true derivative is ~0 are judged on an absolute scale
GRAD_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    name: str
    coords: int
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= 1e-4


def rel_error(a: float, n: float, floor: float = GRAD_FLOOR) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], n_coords: int = 32,
                    h: float = 1e-5, seed: int = 0) -> list[GradCheckResult]:
    """Compare reverse-mode gradients with central differences on sampled coordinates.

    ``loss_fn`` must rebuild the graph from the current ``params`` data each call.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    rng = np.random.default_rng(seed)
    results = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        k = min(n_coords, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = loss_fn().item()
            flat[c] = orig - h
            down = loss_fn().item()
            flat[c] = orig
            num = (up - down) / (2 * h)
            worst = max(worst, rel_error(analytic[name].reshape(-1)[c], num))
        results.append(GradCheckResult(name, k, worst))
    return results

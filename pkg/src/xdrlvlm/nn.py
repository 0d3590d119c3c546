"""Parameter containers and the pre-norm transformer block shared by encoder and decoder."""

from __future__ import annotations

import hashlib

import numpy as np

from .numerics import Tensor, gelu, layer_norm, softmax
from .numerics.tensor import DimensionError


class ParamSet:
    """Ordered name -> Tensor mapping with init, snapshot and checksum helpers."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(np.ascontiguousarray(data, dtype=np.float64), requires_grad=True)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.tensors) - set(state)
        if missing:
            raise KeyError(f"missing tensors: {sorted(missing)}")
        for k, t in self.tensors.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(f"{k}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = arr.copy()

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(self.tensors[k].data.tobytes())
        return h.hexdigest()

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def init_linear(ps: ParamSet, name: str, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                scale: float | None = None) -> None:
    std = scale if scale is not None else 1.0 / np.sqrt(d_in)
    ps.add(f"{name}.w", rng.normal(0.0, std, size=(d_in, d_out)))
    if bias:
        ps.add(f"{name}.b", np.zeros(d_out))


def linear(ps: ParamSet, name: str, x: Tensor) -> Tensor:
    y = x @ ps[f"{name}.w"]
    b = f"{name}.b"
    return y + ps[b] if b in ps else y


def init_norm(ps: ParamSet, name: str, d: int) -> None:
    ps.add(f"{name}.g", np.ones(d))
    ps.add(f"{name}.b", np.zeros(d))


def norm(ps: ParamSet, name: str, x: Tensor) -> Tensor:
    return layer_norm(x, ps[f"{name}.g"], ps[f"{name}.b"])


def init_block(ps: ParamSet, name: str, d: int, mlp_ratio: int, rng: np.random.Generator, n_layers: int) -> None:
    init_norm(ps, f"{name}.ln1", d)
    init_linear(ps, f"{name}.qkv", d, 3 * d, rng)
    # residual projections scaled down with depth
    init_linear(ps, f"{name}.proj", d, d, rng, scale=1.0 / np.sqrt(d * 2 * n_layers))
    init_norm(ps, f"{name}.ln2", d)
    init_linear(ps, f"{name}.fc1", d, mlp_ratio * d, rng)
    init_linear(ps, f"{name}.fc2", mlp_ratio * d, d, rng, scale=1.0 / np.sqrt(mlp_ratio * d * 2 * n_layers))


def attention(ps: ParamSet, name: str, x: Tensor, heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention over x of shape (B, T, D)."""
    b, t, d = x.shape
    dh = d // heads
    qkv = linear(ps, f"{name}.qkv", x).reshape(b, t, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    att = softmax(scores, axis=-1, mask=mask)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return linear(ps, f"{name}.proj", out)


def block(ps: ParamSet, name: str, x: Tensor, heads: int, mask: np.ndarray | None = None) -> Tensor:
    x = x + attention(ps, name, norm(ps, f"{name}.ln1", x), heads, mask)
    h = gelu(linear(ps, f"{name}.fc1", norm(ps, f"{name}.ln2", x)))
    return x + linear(ps, f"{name}.fc2", h)


def causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))

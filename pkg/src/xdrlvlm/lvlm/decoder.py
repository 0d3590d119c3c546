"""Tiny causal transformer decoder with tied input/output embeddings, and multimodal input assembly."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..nn import ParamSet, block, causal_mask, init_block, init_norm, norm
from ..numerics import Tensor, concat, cross_entropy, embedding
from ..numerics.tensor import LN_EPS, DimensionError
from ..numerics.weights_io import load_weights, save_weights
from .vocab import BOS, EOS, IMG, PAD

IMAGE_SLOT, PROMPT, RESPONSE = "image_slot", "prompt", "response"


@dataclass
class DecoderConfig:
    vocab_size: int
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    max_positions: int = 160

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.vocab_size <= 4:
            raise ValueError("vocabulary must contain words beyond the specials")


@dataclass
class TokenSequence:
    ids: list[int]
    roles: list[str]

    def __post_init__(self):
        if len(self.ids) != len(self.roles):
            raise ValueError(f"{len(self.ids)} ids but {len(self.roles)} roles")
        img = [i for i, r in enumerate(self.roles) if r == IMAGE_SLOT]
        if img and img != list(range(len(img))):
            raise ValueError("image slots must be contiguous and first")

    def __len__(self) -> int:
        return len(self.ids)

    def loss_mask(self) -> np.ndarray:
        """mask[i] is set when position i predicts a response token (including <eos>)."""
        roles = np.array(self.roles)
        m = np.zeros(len(roles), dtype=bool)
        m[:-1] = roles[1:] == RESPONSE
        return m

    def targets(self) -> np.ndarray:
        t = np.full(len(self.ids), PAD, dtype=np.int64)
        t[:-1] = self.ids[1:]
        return t


class Decoder:
    def __init__(self, config: DecoderConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.d_model
        self.params = ParamSet()
        self.params.add("tok_emb", rng.normal(0.0, 1.0 / np.sqrt(d), size=(config.vocab_size, d)))
        self.params.add("pos_emb", rng.normal(0.0, 0.1, size=(config.max_positions, d)))
        for i in range(config.layers):
            init_block(self.params, f"layer{i}", d, config.mlp_ratio, rng, config.layers)
        init_norm(self.params, "final_norm", d)

    @property
    def embedding_table(self) -> np.ndarray:
        return self.params["tok_emb"].data

    def embed_tokens(self, ids) -> Tensor:
        return embedding(self.params["tok_emb"], ids)

    def hidden(self, x: Tensor) -> Tensor:
        """(B, T, D) input embeddings (positions not yet added) -> final-norm hidden states."""
        cfg = self.config
        if x.ndim != 3 or x.shape[-1] != cfg.d_model:
            raise DimensionError(f"decoder expects (B, T, {cfg.d_model}) inputs, got {x.shape}")
        t = x.shape[1]
        if t > cfg.max_positions:
            raise DimensionError(f"sequence length {t} exceeds positional table of {cfg.max_positions}")
        h = x + self.params["pos_emb"][:t]
        mask = causal_mask(t)
        for i in range(cfg.layers):
            h = block(self.params, f"layer{i}", h, cfg.heads, mask)
        return norm(self.params, "final_norm", h)

    def logits(self, h: Tensor) -> Tensor:
        # tied output projection
        return h @ self.params["tok_emb"].transpose()

    # -- inference path: plain numpy with a key/value cache -------------------
    def start_cache(self, batch: int) -> "KVCache":
        return KVCache(self.config.layers, batch)

    def step(self, x: np.ndarray, cache: "KVCache") -> np.ndarray:
        """Append new rows x (B, t, D) to the cached context; return final-norm hidden states of the new rows.

        Mirrors ``hidden`` exactly (same formulas), without building a graph.
        """
        cfg, ps = self.config, self.params
        b, t, d = x.shape
        start = cache.length
        if start + t > cfg.max_positions:
            raise DimensionError(f"sequence length {start + t} exceeds positional table of {cfg.max_positions}")
        h = x + ps["pos_emb"].data[start:start + t]
        nh, dh = cfg.heads, d // cfg.heads
        for i in range(cfg.layers):
            name = f"layer{i}"
            a = _np_norm(ps, f"{name}.ln1", h)
            qkv = (a @ ps[f"{name}.qkv.w"].data + ps[f"{name}.qkv.b"].data)
            qkv = qkv.reshape(b, t, 3, nh, dh).transpose(2, 0, 3, 1, 4)
            k, v = cache.extend(i, qkv[1], qkv[2])
            scores = (qkv[0] @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
            # new row j sits at absolute position start + j and may see keys up to there
            allowed = np.arange(start + t)[None, :] <= (start + np.arange(t))[:, None]
            scores = np.where(allowed, scores, -np.inf)
            scores = scores - scores.max(axis=-1, keepdims=True)
            w = np.exp(scores)
            w /= w.sum(axis=-1, keepdims=True)
            att = (w @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
            h = h + att @ ps[f"{name}.proj.w"].data + ps[f"{name}.proj.b"].data
            m = _np_norm(ps, f"{name}.ln2", h) @ ps[f"{name}.fc1.w"].data + ps[f"{name}.fc1.b"].data
            m = 0.5 * m * (1.0 + np.tanh(_GELU_C * m * (1.0 + 0.044715 * m * m)))
            h = h + m @ ps[f"{name}.fc2.w"].data + ps[f"{name}.fc2.b"].data
        cache.length += t
        return _np_norm(ps, "final_norm", h)

    def save(self, path) -> None:
        save_weights(path, self.params.state_dict(), {"component": "decoder", "config": asdict(self.config)})

    @classmethod
    def load(cls, path) -> "Decoder":
        tensors, meta = load_weights(path)
        dec = cls(DecoderConfig(**meta["config"]))
        dec.params.load_state_dict(tensors)
        return dec


_GELU_C = np.sqrt(2.0 / np.pi)


def _np_norm(ps: ParamSet, name: str, x: np.ndarray) -> np.ndarray:
    xc = x - x.mean(axis=-1, keepdims=True)
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * (1.0 / np.sqrt(var + LN_EPS)) * ps[f"{name}.g"].data + ps[f"{name}.b"].data


class KVCache:
    def __init__(self, layers: int, batch: int):
        self.keys: list[np.ndarray | None] = [None] * layers
        self.values: list[np.ndarray | None] = [None] * layers
        self.batch = batch
        self.length = 0

    def extend(self, layer: int, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.keys[layer] is None:
            self.keys[layer], self.values[layer] = k, v
        else:
            self.keys[layer] = np.concatenate([self.keys[layer], k], axis=2)
            self.values[layer] = np.concatenate([self.values[layer], v], axis=2)
        return self.keys[layer], self.values[layer]


def assemble_input(f_proj, prompt_ids: list[int], decoder: Decoder,
                   response_ids: list[int] | None = None) -> tuple[TokenSequence, Tensor]:
    """Single-sample S_input: [image rows ; <bos> prompt ; response <eos>].

    Returns the role-tagged sequence and its (T, D) embedding matrix before positions are added
    (the decoder adds positional embeddings over the whole sequence).
    """
    f_proj = f_proj if isinstance(f_proj, Tensor) else Tensor(f_proj)
    d = decoder.config.d_model
    if f_proj.ndim != 2 or f_proj.shape[1] != d:
        raise DimensionError(f"projected features must be (P, {d}), got {f_proj.shape}")
    p = f_proj.shape[0]
    ids = [IMG] * p + [BOS] + list(prompt_ids)
    roles = [IMAGE_SLOT] * p + [PROMPT] * (1 + len(prompt_ids))
    if response_ids is not None:
        ids += list(response_ids) + [EOS]
        roles += [RESPONSE] * (len(response_ids) + 1)
    if len(ids) > decoder.config.max_positions:
        raise DimensionError(f"sequence length {len(ids)} exceeds positional table of "
                             f"{decoder.config.max_positions}")
    seq = TokenSequence(ids, roles)
    return seq, concat([f_proj, decoder.embed_tokens(ids[p:])], axis=0)


def decoder_forward(emb: Tensor, decoder: Decoder) -> Tensor:
    """(T, D) or (B, T, D) embeddings -> logits of matching leading shape with width V."""
    single = emb.ndim == 2
    x = emb.reshape(1, *emb.shape) if single else emb
    out = decoder.logits(decoder.hidden(x))
    return out.reshape(*out.shape[1:]) if single else out


def generation_loss(logits: Tensor, seq: TokenSequence) -> Tensor:
    """Mean next-token cross-entropy over positions whose target is a response token."""
    if logits.shape[:-1] != (len(seq),):
        raise DimensionError(f"logits {logits.shape} do not match sequence length {len(seq)}")
    mask = seq.loss_mask()
    if not mask.any():
        raise ValueError("sequence has no response tokens")
    return cross_entropy(logits, seq.targets(), mask)

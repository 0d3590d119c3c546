"""Tiny ViT image encoder plus the supervised concept pre-training used as a
stand-in for domain pre-training."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .nn import ParamSet, block, init_block, init_linear, init_norm, linear, norm
from .numerics import AdamW, Tensor, backward, bce_with_logits, no_grad
from .numerics.tensor import DimensionError
from .numerics.weights_io import load_weights, save_weights

log = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    image_side: int = 64
    patch_size: int = 8
    embed_dim: int = 32
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.image_side % self.patch_size:
            raise ValueError(f"image side {self.image_side} not divisible by patch size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_side // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size**2


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(..., H, W, 3) -> (..., P, 3*p*p); patches row-major, each flattened as (row, col, channel)."""
    *lead, h, w, c = images.shape
    if h % patch_size or w % patch_size:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(*lead, gh, patch_size, gw, patch_size, c)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, gh * gw, patch_size * patch_size * c)


def unpatchify(patches: np.ndarray, patch_size: int, side: int) -> np.ndarray:
    *lead, n, d = patches.shape
    g = side // patch_size
    x = patches.reshape(*lead, g, g, patch_size, patch_size, 3)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, side, side, 3)


def preprocess(images: np.ndarray, sigma: float = 3.0, gain: float = 8.0) -> np.ndarray:
    """Background-subtracted contrast map: gain * (image - gaussian_blur(image)) inside the fundus.

    The usual local-average subtraction for fundus photographs; it strips the
    illumination gradient and leaves lesions as sparse deviations from zero.
    """
    blur = gaussian_filter(images, sigma=(0,) * (images.ndim - 3) + (sigma, sigma, 0))
    inside = images.max(axis=-1, keepdims=True) > 0.04
    return gain * (images - blur) * inside


class VisionEncoder:
    def __init__(self, config: EncoderConfig, params: ParamSet, init_mode: str = "generic"):
        self.config = config
        self.params = params
        self.init_mode = init_mode

    def forward(self, images: np.ndarray, preprocessed: bool = False) -> Tensor:
        """Batched forward: (B, H, W, 3) -> (B, P, D)."""
        cfg = self.config
        if images.ndim != 4 or images.shape[1:] != (cfg.image_side, cfg.image_side, 3):
            raise DimensionError(f"expected (B, {cfg.image_side}, {cfg.image_side}, 3) images, got {images.shape}")
        if not preprocessed:
            images = preprocess(images)
        ps = self.params
        x = linear(ps, "patch", Tensor(patchify(images, cfg.patch_size)))
        x = x + ps["pos"]
        for i in range(cfg.layers):
            x = block(ps, f"layer{i}", x, cfg.heads)
        return norm(ps, "final_norm", x)

    def encode(self, image: np.ndarray) -> np.ndarray:
        """Single image -> F_V of shape (P, D)."""
        with no_grad():
            return self.forward(image[None]).data[0]

    def encode_batch(self, images: np.ndarray, chunk: int = 64, preprocessed: bool = False) -> np.ndarray:
        with no_grad():
            return np.concatenate([self.forward(images[i:i + chunk], preprocessed).data
                                   for i in range(0, len(images), chunk)])

    def save(self, path) -> None:
        save_weights(path, self.params.state_dict(), {"component": "vision_encoder", "init_mode": self.init_mode,
                                                      "config": asdict(self.config)})

    @classmethod
    def load(cls, path) -> "VisionEncoder":
        tensors, meta = load_weights(path)
        enc = init_weights(EncoderConfig(**meta["config"]), seed=0, mode="generic")
        enc.params.load_state_dict(tensors)
        enc.init_mode = meta["init_mode"]
        return enc


def _random_params(config: EncoderConfig, seed: int) -> ParamSet:
    rng = np.random.default_rng(seed)
    ps = ParamSet()
    init_linear(ps, "patch", config.patch_dim, config.embed_dim, rng)
    ps.add("pos", rng.normal(0.0, 0.02, size=(config.num_patches, config.embed_dim)))
    for i in range(config.layers):
        init_block(ps, f"layer{i}", config.embed_dim, config.mlp_ratio, rng, config.layers)
    init_norm(ps, "final_norm", config.embed_dim)
    return ps


def init_weights(config: EncoderConfig, seed: int, mode: str = "generic", dataset=None,
                 epochs: int = 10, **pretrain_kw) -> VisionEncoder:
    """``generic``: seeded random init.  ``medical``: random init, then concept pre-training on ``dataset``."""
    if mode not in ("generic", "medical"):
        raise ValueError(f"unknown init mode {mode!r}")
    enc = VisionEncoder(config, _random_params(config, seed), "generic")
    if mode == "medical":
        if dataset is None:
            raise ValueError("medical init needs a pre-training dataset")
        pretrain_encoder(enc, dataset, epochs, seed=seed, **pretrain_kw)
        enc.init_mode = "medical"
    return enc


def per_concept_f1(pred: np.ndarray, true: np.ndarray) -> list[float]:
    f1s = []
    for k in range(true.shape[1]):
        tp = np.sum(pred[:, k] & true[:, k])
        fp = np.sum(pred[:, k] & ~true[:, k])
        fn = np.sum(~pred[:, k] & true[:, k])
        f1s.append(0.0 if tp == 0 else float(2 * tp / (2 * tp + fp + fn)))
    return f1s


def _macro_f1(pred: np.ndarray, true: np.ndarray) -> float:
    return float(np.mean(per_concept_f1(pred, true)))


N_CONCEPTS = 6


def lesion_count_targets(dataset) -> np.ndarray:
    """log1p lesion count per kind, scaled so the largest observed value is about 1."""
    from .synthfundus import KINDS

    counts = np.array([[sum(l.kind == k for l in s.lesions) for k in KINDS] for s in dataset], dtype=float)
    return np.log1p(counts) / np.log1p(40.0)


def concept_head_predict(enc: VisionEncoder, head: ParamSet, images: np.ndarray, chunk: int = 128) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), chunk):
            feats = enc.forward(images[i:i + chunk], preprocessed=True).mean(axis=1)
            out.append(linear(head, "head", feats).data[:, :N_CONCEPTS] > 0)
    return np.concatenate(out)


def pretrain_encoder(enc: VisionEncoder, dataset, epochs: int, batch_size: int = 8, lr: float = 3e-3,
                     weight_decay: float = 0.01, seed: int = 0, history: dict | None = None,
                     counts: bool = True) -> VisionEncoder:
    """Train the encoder with a temporary head on mean-pooled features (head discarded).

    The head predicts the six concept flags (sigmoid/BCE) and, with ``counts``, the
    scaled log lesion count of each kind (squared error), since the grading rule
    depends on counts and presence alone saturates that signal.
    ``dataset`` is a sequence of samples with ``image``, ``concepts`` and ``lesions``.
    When ``history`` is given it receives per-epoch mean losses and the head's
    concept macro-F1 before and after.
    """
    if len(dataset) == 0:
        raise ValueError("pre-training dataset is empty")
    images = preprocess(np.stack([s.image for s in dataset]))
    labels = np.array([s.concepts for s in dataset], dtype=bool)
    amounts = lesion_count_targets(dataset) if counts else None
    rng = np.random.default_rng(seed + 1)
    head = ParamSet()
    init_linear(head, "head", enc.config.embed_dim, N_CONCEPTS * (2 if counts else 1), rng)
    if history is not None:
        history["f1_before"] = _macro_f1(concept_head_predict(enc, head, images), labels)
        history["epoch_loss"] = []
    if epochs <= 0:
        return enc

    n = len(images)
    steps_per_epoch = (n + batch_size - 1) // batch_size
    params = dict(enc.params.items())
    params.update({f"head/{k}": v for k, v in head.items()})
    opt = AdamW(params, total_steps=epochs * steps_per_epoch, lr=lr, weight_decay=weight_decay)
    for ep in range(epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            feats = enc.forward(images[idx], preprocessed=True).mean(axis=1)
            out = linear(head, "head", feats)
            loss = bce_with_logits(out[:, :N_CONCEPTS], labels[idx])
            if counts:
                err = out[:, N_CONCEPTS:] - amounts[idx]
                loss = loss + (err * err).mean()
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(loss.item())
        log.info("encoder pretrain epoch %d loss %.4f", ep, np.mean(losses))
        if history is not None:
            history["epoch_loss"].append(float(np.mean(losses)))
    if history is not None:
        pred = concept_head_predict(enc, head, images)
        history["f1_after"] = _macro_f1(pred, labels)
        history["f1_per_concept"] = per_concept_f1(pred, labels)
    return enc

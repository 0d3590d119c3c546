"""Vision-language connector (two-layer perceptron) and contrastive Stage-1 alignment."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .nn import ParamSet, init_linear, linear
from .numerics import AdamW, Tensor, backward, cross_entropy, gelu, no_grad, sqrt
from .numerics.tensor import DimensionError
from .numerics.weights_io import save_weights
from .vision_encoder import preprocess

log = logging.getLogger(__name__)


class Connector:
    """F_V (P x D_v) -> F'_V (P x D_t), applied row-wise."""

    def __init__(self, d_vision: int, d_text: int, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.d_vision, self.d_text, self.hidden = d_vision, d_text, hidden
        self.params = ParamSet()
        init_linear(self.params, "fc1", d_vision, hidden, rng)
        init_linear(self.params, "fc2", hidden, d_text, rng)

    def project(self, f_v) -> Tensor:
        f_v = f_v if isinstance(f_v, Tensor) else Tensor(f_v)
        if f_v.shape[-1] != self.d_vision:
            raise DimensionError(f"connector expects width {self.d_vision}, got features of shape {f_v.shape}")
        return linear(self.params, "fc2", gelu(linear(self.params, "fc1", f_v)))

    def save(self, path) -> None:
        save_weights(path, self.params.state_dict(),
                     {"component": "connector", "d_vision": self.d_vision, "d_text": self.d_text,
                      "hidden": self.hidden})


def project(f_v, connector: Connector) -> Tensor:
    return connector.project(f_v)


def pool(features) -> Tensor:
    """Mean over rows (axis -2), then L2-normalise.  Works batched: (..., n, d) -> (..., d)."""
    features = features if isinstance(features, Tensor) else Tensor(features)
    if features.ndim < 2 or features.shape[-2] < 1:
        raise DimensionError(f"pool needs at least one row, got shape {features.shape}")
    m = features.mean(axis=-2)
    sq = (m * m).sum(axis=-1, keepdims=True)
    if np.any(sq.data < 1e-24):
        raise ValueError("pool: mean vector is zero, cannot normalise")
    return m / sqrt(sq)


def contrastive_loss(img_vecs, txt_vecs, tau: float = 0.07) -> Tensor:
    """Symmetric InfoNCE over the N x N similarity matrix with diagonal targets."""
    img_vecs = img_vecs if isinstance(img_vecs, Tensor) else Tensor(img_vecs)
    txt_vecs = txt_vecs if isinstance(txt_vecs, Tensor) else Tensor(txt_vecs)
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if img_vecs.shape != txt_vecs.shape or img_vecs.ndim != 2 or img_vecs.shape[0] < 1:
        raise DimensionError(f"need two equal (N, d) stacks, got {img_vecs.shape} and {txt_vecs.shape}")
    for name, v in (("image", img_vecs), ("text", txt_vecs)):
        norms = np.linalg.norm(v.data, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError(f"{name} vectors must be unit-norm (max deviation {np.abs(norms - 1).max():.2e})")
    n = img_vecs.shape[0]
    logits = (img_vecs @ txt_vecs.transpose()) * (1.0 / tau)
    targets = np.arange(n)
    return (cross_entropy(logits, targets) + cross_entropy(logits.transpose(), targets)) * 0.5


def retrieval_at_1(img_vecs, txt_vecs) -> float:
    a = np.asarray(img_vecs.data if isinstance(img_vecs, Tensor) else img_vecs)
    b = np.asarray(txt_vecs.data if isinstance(txt_vecs, Tensor) else txt_vecs)
    if len(a) == 0 or len(a) != len(b):
        raise ValueError(f"retrieval needs equal non-zero counts, got {len(a)} and {len(b)}")
    # argmax returns the first maximum: ties resolve to the lower index
    nearest = np.argmax(a @ b.T, axis=1)
    return float(np.mean(nearest == np.arange(len(a))))


def text_vectors(embedding_table: np.ndarray, token_ids: list[list[int]]) -> np.ndarray:
    """Stage-1 text side: mean-pooled token embeddings, L2-normalised."""
    out = np.stack([embedding_table[np.asarray(ids)].mean(axis=0) for ids in token_ids])
    return out / np.linalg.norm(out, axis=1, keepdims=True)


@dataclass
class AlignResult:
    losses: list[tuple[int, float, float]] = field(default_factory=list)  # (step, lr, loss)
    retrieval_before: float = float("nan")
    retrieval_after: float = float("nan")
    steps: int = 0

    def write_curve(self, path) -> None:
        with open(path, "w") as fh:
            for step, lr, loss in self.losses:
                fh.write(f"{step} {lr:.10g} {loss:.10g}\n")


def image_vectors(encoder, connector: Connector, pix: np.ndarray, feats: np.ndarray | None = None,
                  chunk: int = 128) -> np.ndarray:
    """Pooled projected vectors for preprocessed images (or for cached encoder features)."""
    with no_grad():
        if feats is None:
            feats = encoder.encode_batch(pix, preprocessed=True)
        return np.concatenate([pool(connector.project(feats[i:i + chunk])).data
                               for i in range(0, len(feats), chunk)])


def retrieval_ceiling(txt_vecs: np.ndarray, tau: float = 0.07, steps: int = 1500, lr: float = 3e-2,
                      seed: int = 0) -> float:
    """Retrieval@1 reached when every image vector is a free parameter trained on the same loss.

    No encoder/connector can beat this on a fixed text side, so it bounds what
    alignment can achieve for a given caption set and temperature.
    """
    n, d = txt_vecs.shape
    u = Tensor(np.random.default_rng(seed).normal(size=(n, d)), requires_grad=True)
    opt = AdamW({"u": u}, total_steps=steps, lr=lr)
    txt = Tensor(txt_vecs)
    for _ in range(steps):
        loss = contrastive_loss(pool(u.reshape(n, 1, d)), txt, tau)
        opt.zero_grad()
        backward(loss)
        opt.step()
    return retrieval_at_1(pool(u.data.reshape(n, 1, d)).data, txt_vecs)


def align_train(encoder, connector: Connector, embedding_table: np.ndarray, images: np.ndarray,
                captions: list[list[int]], epochs: int = 30, batch_size: int = 16, tau: float = 0.07,
                lr: float = 1e-2, weight_decay: float = 0.01, freeze_encoder: bool = True,
                seed: int = 0) -> AlignResult:
    """Minimise symmetric InfoNCE between pooled projected image features and caption vectors.

    ``captions`` are token-id lists; the text side is fixed during this stage.
    """
    if len(images) == 0:
        raise ValueError("no image-caption pairs")
    if len(images) != len(captions):
        raise ValueError(f"{len(images)} images but {len(captions)} captions")
    txt = text_vectors(embedding_table, captions)
    pre = None
    pix = preprocess(images)
    if freeze_encoder:
        with no_grad():
            pre = encoder.encode_batch(pix, preprocessed=True)
    result = AlignResult()
    result.retrieval_before = retrieval_at_1(image_vectors(encoder, connector, pix, pre), txt)
    if epochs <= 0:
        result.retrieval_after = result.retrieval_before
        return result

    n = len(images)
    steps_per_epoch = (n + batch_size - 1) // batch_size
    params = {f"connector/{k}": v for k, v in connector.params.items()}
    if not freeze_encoder:
        params.update({f"encoder/{k}": v for k, v in encoder.params.items()})
    opt = AdamW(params, total_steps=epochs * steps_per_epoch, lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    step = 0
    for ep in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            feats = Tensor(pre[idx]) if freeze_encoder else encoder.forward(pix[idx], preprocessed=True)
            loss = contrastive_loss(pool(connector.project(feats)), Tensor(txt[idx]), tau)
            opt.zero_grad()
            backward(loss)
            used = opt.step()
            result.losses.append((step, used, loss.item()))
            step += 1
        log.info("align epoch %d loss %.4f", ep, result.losses[-1][2])
    result.steps = step
    feats_after = pre if freeze_encoder else None
    result.retrieval_after = retrieval_at_1(image_vectors(encoder, connector, pix, feats_after), txt)
    return result

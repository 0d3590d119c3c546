"""Stage-2 instruction tuning and batched greedy generation for the assembled model."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..connector import Connector
from ..numerics import AdamW, Tensor, backward, concat, cross_entropy, no_grad
from ..numerics.weights_io import load_weights
from ..reportgen import concept_answer_for_sample, report_for_sample
from ..vision_encoder import VisionEncoder, preprocess
from .decoder import Decoder
from .prompts import PROMPTS
from .vocab import BOS, EOS, PAD, Vocabulary, detokenize, tokenize

log = logging.getLogger(__name__)

PROMPT_MODES = ("multitask", "generic")


@dataclass
class LVLM:
    encoder: VisionEncoder
    connector: Connector
    decoder: Decoder
    vocab: Vocabulary

    def project(self, pix: np.ndarray) -> Tensor:
        """Preprocessed images (B, H, W, 3) -> F'_V of shape (B, P, D_t)."""
        return self.connector.project(self.encoder.forward(pix, preprocessed=True))

    def prompt_ids(self, name: str) -> list[int]:
        return tokenize(PROMPTS[name], self.vocab)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.encoder.save(out / "encoder.xdrw")
        self.connector.save(out / "connector.xdrw")
        self.decoder.save(out / "decoder.xdrw")
        self.vocab.save(out / "vocab.txt")

    @classmethod
    def load(cls, in_dir) -> "LVLM":
        d = Path(in_dir)
        enc = VisionEncoder.load(d / "encoder.xdrw")
        tensors, meta = load_weights(d / "connector.xdrw")
        con = Connector(meta["d_vision"], meta["d_text"], meta["hidden"])
        con.params.load_state_dict(tensors)
        return cls(enc, con, Decoder.load(d / "decoder.xdrw"), Vocabulary.load(d / "vocab.txt"))


@dataclass(frozen=True)
class TrainItem:
    sample: int
    task: str
    prompt_ids: tuple[int, ...]
    response_ids: tuple[int, ...]


def build_items(samples, vocab: Vocabulary, prompt_mode: str = "multitask") -> list[TrainItem]:
    """Two items per sample (diagnosis -> report, concept -> concept answer), or one generic item."""
    if prompt_mode not in PROMPT_MODES:
        raise ValueError(f"unknown prompt mode {prompt_mode!r}")
    items = []
    diag, conc, gen = (tuple(tokenize(PROMPTS[k], vocab)) for k in ("diagnosis", "concept", "generic"))
    for i, s in enumerate(samples):
        report = tuple(tokenize(report_for_sample(s), vocab))
        answer = tuple(tokenize(concept_answer_for_sample(s), vocab))
        if prompt_mode == "multitask":
            items.append(TrainItem(i, "diagnosis", diag, report))
            items.append(TrainItem(i, "concept", conc, answer))
        else:
            items.append(TrainItem(i, "generic", gen, report + answer))
    return items


def _pad_batch(items: list[TrainItem]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Token block [<bos> prompt response <eos> <pad>...] plus (row, col) of every loss position."""
    seqs = [(BOS,) + it.prompt_ids + it.response_ids + (EOS,) for it in items]
    width = max(len(s) for s in seqs)
    ids = np.full((len(items), width), PAD, dtype=np.int64)
    rows, cols = [], []
    for b, (s, it) in enumerate(zip(seqs, items)):
        ids[b, :len(s)] = s
        # text position j predicts token j+1; the first response token follows the last prompt token
        start = len(it.prompt_ids)
        rows.extend([b] * (len(s) - 1 - start))
        cols.extend(range(start, len(s) - 1))
    return ids, np.array(rows), np.array(cols)


def batch_loss(model: LVLM, items: list[TrainItem], pix: np.ndarray, feats: np.ndarray | None = None) -> Tensor:
    """Masked next-token loss for a batch; ``pix`` / ``feats`` are indexed by the items' sample ids."""
    idx = np.array([it.sample for it in items])
    if feats is not None:
        f_proj = model.connector.project(Tensor(feats[idx]))
    else:
        f_proj = model.project(pix[idx])
    ids, rows, cols = _pad_batch(items)
    x = concat([f_proj, model.decoder.embed_tokens(ids)], axis=1)
    b, t, d = x.shape
    p = f_proj.shape[1]
    h = model.decoder.hidden(x).reshape(b * t, d)
    # logits only where a response token is predicted
    picked = h[rows * t + p + cols]
    return cross_entropy(model.decoder.logits(picked), ids[rows, cols + 1])


@dataclass
class TuneResult:
    losses: list[tuple[int, float, float]] = field(default_factory=list)
    steps: int = 0

    def write_curve(self, path) -> None:
        with open(path, "w") as fh:
            for step, lr, loss in self.losses:
                fh.write(f"{step} {lr:.10g} {loss:.10g}\n")


def instruct_tune(model: LVLM, samples, prompt_mode: str = "multitask", epochs: int = 10, batch_size: int = 16,
                  lr: float = 3e-3, lr_min: float = 0.0, weight_decay: float = 0.01, freeze_encoder: bool = False,
                  freeze_connector: bool = False, seed: int = 0) -> TuneResult:
    """Minimise the response-token loss with AdamW + cosine schedule.

    Items from both tasks are shuffled together every epoch (seeded), so batches
    interleave diagnosis and concept examples at random.
    """
    if len(samples) == 0:
        raise ValueError("instruction-tuning dataset is empty")
    items = build_items(samples, model.vocab, prompt_mode)
    result = TuneResult()
    if epochs <= 0:
        return result
    pix = preprocess(np.stack([s.image for s in samples]))
    feats = None
    params = {}
    if freeze_encoder:
        with no_grad():
            feats = model.encoder.encode_batch(pix, preprocessed=True)
    else:
        params.update({f"encoder/{k}": v for k, v in model.encoder.params.items()})
    if not freeze_connector:
        params.update({f"connector/{k}": v for k, v in model.connector.params.items()})
    params.update({f"decoder/{k}": v for k, v in model.decoder.params.items()})

    n = len(items)
    steps_per_epoch = (n + batch_size - 1) // batch_size
    opt = AdamW(params, total_steps=epochs * steps_per_epoch, lr=lr, lr_min=lr_min, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    step = 0
    for ep in range(epochs):
        order = rng.permutation(n)
        ep_losses = []
        for s in range(0, n, batch_size):
            batch = [items[i] for i in order[s:s + batch_size]]
            loss = batch_loss(model, batch, pix, feats)
            opt.zero_grad()
            backward(loss)
            used = opt.step()
            result.losses.append((step, used, loss.item()))
            ep_losses.append(loss.item())
            step += 1
        log.info("instruct epoch %d loss %.4f", ep, float(np.mean(ep_losses)))
    result.steps = step
    return result


@dataclass
class Generation:
    text: str
    ids: list[int]
    truncated: bool


def generate(model: LVLM, images: np.ndarray, prompt: str, max_len: int = 80, batch_size: int = 64,
             preprocessed: bool = False) -> list[Generation]:
    """Greedy decoding (argmax, ties to the lower id) for each image under one prompt."""
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    if images.ndim == 3:
        images = images[None]
    pix = images if preprocessed else preprocess(images)
    prefix = [BOS] + model.prompt_ids(prompt)
    cfg = model.decoder.config
    room = cfg.max_positions - model.encoder.config.num_patches - len(prefix)
    steps = min(max_len, room)
    out: list[Generation] = []
    dec = model.decoder
    table = dec.embedding_table
    with no_grad():
        for c in range(0, len(pix), batch_size):
            f_proj = model.project(pix[c:c + batch_size]).data
            b = f_proj.shape[0]
            cache = dec.start_cache(b)
            x = np.concatenate([f_proj, np.broadcast_to(table[prefix], (b, len(prefix), table.shape[1]))], axis=1)
            done = np.zeros(b, dtype=bool)
            gen = np.full((b, 0), PAD, dtype=np.int64)
            for _ in range(steps):
                h = dec.step(x, cache)[:, -1]
                nxt = np.argmax(h @ table.T, axis=1)
                nxt = np.where(done, PAD, nxt)
                gen = np.concatenate([gen, nxt[:, None]], axis=1)
                done |= nxt == EOS
                if done.all():
                    break
                x = table[nxt][:, None]
            for row, fin in zip(gen, done):
                toks = [int(t) for t in row]
                toks = toks[:toks.index(EOS)] if fin else toks
                out.append(Generation(detokenize(toks, model.vocab), toks, not fin))
    return out

"""End-to-end two-stage pipeline, the ablation suite, and table emission."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..connector import Connector, align_train
from ..evaluation import GRADE_NAMES, MetricsReport, evaluate_model, write_predictions
from ..lvlm.decoder import Decoder, DecoderConfig
from ..lvlm.training import LVLM, generate, instruct_tune
from ..lvlm.vocab import build_vocab, tokenize
from ..reportgen import grammar_corpus, render_caption
from ..synthfundus import (DatasetConfig, DatasetManifest, GradingThresholds, build_samples, sample_record, split,
                           write_ppm)
from ..vision_encoder import EncoderConfig, init_weights
from .config import VARIANTS, ExperimentConfig

log = logging.getLogger(__name__)

STALE_MARKER = "STALE"


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunRecord:
    config: dict
    input_hash: str
    stage1_steps: int
    stage2_steps: int
    losses: dict
    metrics: dict[str, MetricsReport]
    seconds: float
    out_dir: str | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"config": self.config, "input_hash": self.input_hash, "stage1_steps": self.stage1_steps,
                "stage2_steps": self.stage2_steps, "losses": self.losses,
                "metrics": {k: v.to_dict() for k, v in self.metrics.items()}, "seconds": self.seconds,
                "extras": self.extras}

    def metric(self, task: str, name: str) -> float:
        try:
            return float(getattr(self.metrics[task], name))
        except (KeyError, AttributeError, TypeError):
            raise KeyError(f"run record has no {task}.{name} metric") from None

    @classmethod
    def load(cls, path) -> "RunRecord":
        d = json.loads(Path(path).read_text())
        metrics = {k: MetricsReport(**v) for k, v in d["metrics"].items()}
        return cls(d["config"], d["input_hash"], d["stage1_steps"], d["stage2_steps"], d["losses"], metrics,
                   d["seconds"], str(Path(path).parent), d.get("extras", {}))


def _stage(name: str):
    """Wrap a pipeline stage so any failure carries the stage name."""
    def deco(fn):
        def wrapped(*a, **kw):
            log.info("stage %s", name)
            try:
                return fn(*a, **kw)
            except PipelineError:
                raise
            except Exception as e:  # noqa: BLE001 - re-raised with context
                raise PipelineError(name, e) from e
        return wrapped
    return deco


@_stage("data")
def _stage_data(cfg: ExperimentConfig, out: Path | None):
    dcfg = DatasetConfig(tuple(cfg.data_counts), cfg.data_seed,
                         GradingThresholds(cfg.hemorrhage_threshold, cfg.soft_exudate_threshold))
    samples = build_samples(dcfg)
    records = [sample_record(s, f"images/{s.id}.ppm") for s in samples]
    records = split(records, (1.0 - cfg.test_fraction, 0.0, cfg.test_fraction), seed=cfg.data_seed)
    for s, r in zip(samples, records):
        s.split = r["split"]
    if out is not None:
        (out / "data" / "images").mkdir(parents=True, exist_ok=True)
        for s, r in zip(samples, records):
            write_ppm(out / "data" / r["image"], s.image)
        DatasetManifest(records, dcfg.seed).write(out / "data" / "manifest.jsonl")
    manifest_bytes = "\n".join(json.dumps(r, sort_keys=True) for r in records).encode()
    train = [s for s in samples if s.split == "train"]
    test = [s for s in samples if s.split == "test"]
    return train, test, hashlib.sha256(manifest_bytes).hexdigest()


@_stage("encoder")
def _stage_encoder(cfg: ExperimentConfig, train, cache: dict | None):
    ecfg = EncoderConfig(64, cfg.patch_size, cfg.encoder_dim, cfg.encoder_layers, cfg.encoder_heads)
    key = ("encoder", cfg.encoder_init, cfg.seed, cfg.data_seed, tuple(cfg.data_counts), cfg.pretrain_epochs,
           cfg.pretrain_lr, cfg.test_fraction, ecfg.patch_size, ecfg.embed_dim, ecfg.layers, ecfg.heads)
    if cache is not None and key in cache:
        enc = init_weights(ecfg, cfg.seed, "generic")
        enc.params.load_state_dict(cache[key][0])
        enc.init_mode = cfg.encoder_init
        return enc, dict(cache[key][1])
    hist: dict = {}
    if cfg.encoder_init == "medical":
        enc = init_weights(ecfg, cfg.seed, "medical", dataset=train, epochs=cfg.pretrain_epochs,
                           lr=cfg.pretrain_lr, history=hist)
    else:
        enc = init_weights(ecfg, cfg.seed, "generic")
    if cache is not None:
        cache[key] = (enc.params.state_dict(), hist)
    return enc, hist


@_stage("stage1")
def _stage1(cfg: ExperimentConfig, model: LVLM, train):
    images = np.stack([s.image for s in train])
    captions = [tokenize(render_caption(s.lesions), model.vocab) for s in train]
    return align_train(model.encoder, model.connector, model.decoder.embedding_table, images, captions,
                       epochs=cfg.stage1_epochs, batch_size=cfg.stage1_batch, tau=cfg.stage1_tau,
                       lr=cfg.stage1_lr, seed=cfg.seed)


@_stage("stage2")
def _stage2(cfg: ExperimentConfig, model: LVLM, train):
    return instruct_tune(model, train, prompt_mode=cfg.prompt_mode, epochs=cfg.stage2_epochs,
                         batch_size=cfg.stage2_batch, lr=cfg.stage2_lr, lr_min=cfg.stage2_lr_min,
                         freeze_encoder=cfg.freeze_encoder, seed=cfg.seed)


def model_generator(model: LVLM, prompt_mode: str, max_len: int):
    """Adapter from the model to the evaluation generator interface (memoised per image and prompt)."""
    memo: dict = {}

    def gen(images, task):
        prompt = "generic" if prompt_mode == "generic" else task
        key = (prompt, hashlib.sha256(np.ascontiguousarray(images).tobytes()).hexdigest())
        if key not in memo:
            memo[key] = [g.text for g in generate(model, images, prompt, max_len=max_len)]
        return memo[key]

    return gen


@_stage("eval")
def _stage_eval(cfg: ExperimentConfig, model: LVLM, test, out: Path | None, workers: int | None = None):
    gen = model_generator(model, cfg.prompt_mode, cfg.max_len)
    combined = cfg.prompt_mode == "generic"
    w = workers if workers is not None else cfg.eval_workers
    metrics, preds = {}, []
    for task in ("diagnosis", "concept"):
        rep, p = evaluate_model(gen, test, task, combined=combined, workers=w, seed=cfg.seed, variant=cfg.variant)
        metrics[task] = rep
        preds.extend(p)
    if out is not None:
        write_predictions(out / "predictions.jsonl", preds)
        for task, rep in metrics.items():
            rep.write(out, f"metrics_{task}")
    return metrics


def build_model(cfg: ExperimentConfig, encoder) -> LVLM:
    vocab = build_vocab(grammar_corpus())
    dec = Decoder(DecoderConfig(len(vocab), cfg.decoder_dim, cfg.decoder_layers, cfg.decoder_heads,
                                cfg.decoder_mlp_ratio), seed=cfg.seed + 1)
    con = Connector(cfg.encoder_dim, cfg.decoder_dim, cfg.connector_hidden, seed=cfg.seed + 2)
    return LVLM(encoder, con, dec, vocab)


def run_pipeline(cfg: ExperimentConfig, out_dir=None, cache: dict | None = None) -> RunRecord:
    """data -> encoder init -> Stage 1 (unless no_multistage) -> Stage 2 -> evaluation on the test split."""
    t0 = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / STALE_MARKER).write_text("run incomplete; outputs in this directory are not trustworthy\n")
        (out / "config.txt").write_text(cfg.to_flat())
    train, test, data_hash = _stage_data(cfg, out)
    encoder, pre_hist = _stage_encoder(cfg, train, cache)
    model = build_model(cfg, encoder)
    losses: dict = {}
    stage1_steps = 0
    extras: dict = {"pretrain": pre_hist}
    if cfg.stage1_enabled:
        r1 = _stage1(cfg, model, train)
        stage1_steps = r1.steps
        losses["stage1"] = [x[2] for x in r1.losses]
        extras["stage1_retrieval"] = [r1.retrieval_before, r1.retrieval_after]
        if out is not None:
            r1.write_curve(out / "stage1_loss.txt")
    r2 = _stage2(cfg, model, train)
    losses["stage2"] = [x[2] for x in r2.losses]
    if out is not None:
        r2.write_curve(out / "stage2_loss.txt")
        model.save(out / "checkpoint")
    metrics = _stage_eval(cfg, model, test, out)
    input_hash = hashlib.sha256((cfg.digest() + data_hash).encode()).hexdigest()
    rec = RunRecord(cfg.to_dict(), input_hash, stage1_steps, r2.steps, losses, metrics,
                    time.perf_counter() - t0, str(out) if out is not None else None, extras)
    if out is not None:
        (out / "run_record.json").write_text(json.dumps(rec.to_dict(), indent=2, sort_keys=True) + "\n")
        (out / STALE_MARKER).unlink()
    return rec


def load_split(run_dir, name: str = "test"):
    """Samples of one split from a run directory's own images and manifest."""
    m = DatasetManifest.read(Path(run_dir) / "data" / "manifest.jsonl")
    return [s for s in m.samples() if s.split == name]


def evaluate_run_dir(run_dir, workers: int = 1, out_dir=None) -> dict[str, MetricsReport]:
    """Re-score a finished run from its checkpoint, manifest and images alone."""
    run_dir = Path(run_dir)
    if (run_dir / STALE_MARKER).exists():
        raise PipelineError("eval", RuntimeError(f"{run_dir} is marked stale"))
    try:
        snap = json.loads((run_dir / "run_record.json").read_text())["config"]
        snap["data_counts"] = tuple(snap["data_counts"])
        cfg = ExperimentConfig(**snap)
        model = LVLM.load(run_dir / "checkpoint")
        test = load_split(run_dir, "test")
    except Exception as e:  # noqa: BLE001
        raise PipelineError("eval", e) from e
    return _stage_eval(cfg, model, test, Path(out_dir) if out_dir is not None else None, workers)


# -- ablations -------------------------------------------------------------
ABLATION_COLUMNS = ("variant", "diag BACC", "diag F1", "concept BACC", "concept F1")


@dataclass
class AblationResult:
    records: dict  # (variant, seed) -> RunRecord
    seeds: list[int]

    def means(self) -> dict[str, tuple[float, float, float, float]]:
        out = {}
        for v in VARIANTS:
            rows = [self.records[(v, s)] for s in self.seeds if (v, s) in self.records]
            if rows:
                out[v] = tuple(float(np.mean([r.metric(t, m) for r in rows]))
                               for t, m in (("diagnosis", "bacc"), ("diagnosis", "f1"),
                                            ("concept", "bacc"), ("concept", "f1")))
        return out

    def table(self) -> str:
        head = f"{'variant':<24}{'seed':>6}" + "".join(f"{c:>14}" for c in ABLATION_COLUMNS[1:])
        lines = [head]
        for v in VARIANTS:
            for s in self.seeds:
                r = self.records.get((v, s))
                if r is None:
                    continue
                vals = [r.metric("diagnosis", "bacc"), r.metric("diagnosis", "f1"), r.metric("concept", "bacc"),
                        r.metric("concept", "f1")]
                lines.append(f"{v:<24}{s:>6}" + "".join(f"{x:14.2f}" for x in vals))
        lines.append("")
        lines.append(f"{'variant':<24}{'seeds':>6}" + "".join(f"{c:>14}" for c in ABLATION_COLUMNS[1:]))
        for v, vals in self.means().items():
            lines.append(f"{v:<24}{len(self.seeds):>6}" + "".join(f"{x:14.2f}" for x in vals))
        return "\n".join(lines) + "\n"

    def csv(self) -> str:
        rows = [",".join(ABLATION_COLUMNS)]
        for v, vals in self.means().items():
            rows.append(",".join([v] + [f"{x:.2f}" for x in vals]))
        return "\n".join(rows) + "\n"


def run_ablation_suite(base: ExperimentConfig, seeds, out_dir=None, variants=VARIANTS,
                       reuse: dict | None = None) -> AblationResult:
    """All variants for every seed.  ``reuse`` maps (variant, seed) to an existing RunRecord."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("ablation suite needs at least one seed")
    records = dict(reuse or {})
    cache: dict = {}
    for seed in seeds:
        for v in variants:
            if (v, seed) in records:
                continue
            cfg = base.with_variant(v).replace(seed=seed)
            sub = Path(out_dir) / f"{v}_seed{seed}" if out_dir is not None else None
            records[(v, seed)] = run_pipeline(cfg, sub, cache)
            log.info("ablation %s seed %d: diag BACC %.2f", v, seed, records[(v, seed)].metric("diagnosis", "bacc"))
    result = AblationResult(records, seeds)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.txt").write_text(result.table())
        (Path(out_dir) / "ablation.csv").write_text(result.csv())
    return result


# -- tables ----------------------------------------------------------------
PUBLISHED_DIAGNOSIS = (84.55, 79.92)


def _fmt(x: float, nd: int) -> str:
    return f"{x:.{nd}f}"


def emit_tables(records, out_dir, reference: bool = False, ratings=None) -> list[Path]:
    """Write diagnosis, per-grade and per-concept table files for each record (plus ratings when given).

    ``records`` is a list of RunRecord.  With ``reference`` the published diagnosis
    numbers are printed in a separate row labelled "published (not reproduced)".
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if not records:
        raise ValueError("no run records to tabulate")

    # diagnosis summary, 2 decimals
    rows = [("method", "BACC (%)", "F1 (%)")]
    for r in records:
        rows.append((f"ours ({r.config['variant']}, seed {r.config['seed']})",
                     _fmt(r.metric("diagnosis", "bacc"), 2), _fmt(r.metric("diagnosis", "f1"), 2)))
    if reference:
        rows.append(("published (not reproduced)", _fmt(PUBLISHED_DIAGNOSIS[0], 2), _fmt(PUBLISHED_DIAGNOSIS[1], 2)))
    written += _write_table(out / "table_diagnosis", rows)

    # per-grade precision / recall / F1, 1 decimal
    for r in records:
        per = r.metrics["diagnosis"].per_grade
        if per is None:
            raise KeyError("run record has no diagnosis.per_grade metric")
        rows = [("grade", "Precision (%)", "Recall (%)", "F1 Score (%)")]
        rows += [(name, *(_fmt(x, 1) for x in prf)) for name, prf in zip(GRADE_NAMES, per)]
        written += _write_table(out / f"table_per_grade_{r.config['variant']}_seed{r.config['seed']}", rows)

    # per-concept BACC / F1, 1 decimal
    for r in records:
        per = r.metrics["concept"].per_concept
        if per is None:
            raise KeyError("run record has no concept.per_concept metric")
        rows = [("concept", "BACC (%)", "F1 (%)")]
        rows += [(c["name"], _fmt(c["bacc"], 1), _fmt(c["f1"], 1)) for c in per]
        rows.append(("macro average", _fmt(r.metric("concept", "bacc"), 1), _fmt(r.metric("concept", "f1"), 1)))
        written += _write_table(out / f"table_concepts_{r.config['variant']}_seed{r.config['seed']}", rows)

    if ratings is not None:
        rows = [("", "Fluency", "Accuracy of Explanation", "Clinical Utility")]
        rows.append(("all raters", *(_fmt(ratings.means[a], 1) for a in
                                      ("fluency", "accuracy_of_explanation", "clinical_utility"))))
        written += _write_table(out / "table_ratings", rows)
    return written


def _write_table(stem: Path, rows) -> list[Path]:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    text = "\n".join("  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in
                               enumerate(zip(r, widths))) for r in rows) + "\n"
    csv_text = "\n".join(",".join(str(c) for c in r) for r in rows) + "\n"
    txt, csv = stem.with_suffix(".txt"), stem.with_suffix(".csv")
    txt.write_text(text)
    csv.write_text(csv_text)
    return [txt, csv]


__all__ = ["RunRecord", "PipelineError", "run_pipeline", "run_ablation_suite", "emit_tables", "AblationResult",
           "model_generator", "build_model", "evaluate_run_dir", "load_split"]

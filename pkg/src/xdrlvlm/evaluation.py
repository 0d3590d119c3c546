"""Classification metrics over parsed generations, metric reports, and human-rating aggregation."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .reportgen import (
    GRADE_PHRASES,
    ParseResult,
    concept_answer_for_sample,
    parse_combined,
    parse_concept_answer,
    parse_report,
    report_for_sample,
)
from .synthfundus import KINDS

N_GRADES = 5
GRADE_NAMES = ("No DR", "Mild DR", "Moderate DR", "Severe DR", "Proliferative DR")
RATING_AXES = ("fluency", "accuracy_of_explanation", "clinical_utility")


class MetricError(ValueError):
    pass


# -- confusion matrix ------------------------------------------------------
@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes plus a trailing "invalid" column."""

    k: int = N_GRADES
    counts: np.ndarray = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.k, self.k + 1), dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.k, self.k + 1):
            raise MetricError(f"confusion counts must be {self.k}x{self.k + 1}, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise MetricError("confusion counts must be non-negative")

    @property
    def invalid(self) -> int:
        return self.k

    def add(self, true: int, pred: int | None) -> None:
        self.counts[true, self.k if pred is None else pred] += 1

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.k != self.k:
            raise MetricError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.k, self.counts + other.counts)

    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_pairs(cls, true, pred, k: int = N_GRADES) -> "ConfusionMatrix":
        cm = cls(k)
        for t, p in zip(true, pred):
            cm.add(int(t), None if p is None else int(p))
        return cm


def _recalls(cm: ConfusionMatrix) -> np.ndarray:
    rows = cm.counts.sum(axis=1)
    for c, n in enumerate(rows):
        if n == 0:
            raise MetricError(f"class {c} has no samples; balanced accuracy is undefined")
    return np.diag(cm.counts[:, :cm.k]) / rows


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    """Mean per-class recall in percent; invalid predictions are misses."""
    return float(100.0 * _recalls(cm).mean())


def f1_from(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def per_class_prf(cm) -> list[tuple[float, float, float]]:
    """(precision, recall, F1) per class in percent.  A class never predicted has precision 0.

    ``cm`` may also be a (k, 2) array of already-known precision/recall pairs in
    percent, in which case only the F1 column is computed.
    """
    if not isinstance(cm, ConfusionMatrix):
        pr = np.asarray(cm, dtype=float)
        if pr.ndim != 2 or pr.shape[1] != 2:
            raise MetricError(f"expected a ConfusionMatrix or (k, 2) precision/recall rows, got shape {pr.shape}")
        if ((pr < 0) | (pr > 100)).any():
            raise MetricError("precision and recall must lie in [0, 100]")
        return [(float(p), float(r), f1_from(float(p), float(r))) for p, r in pr]
    diag = np.diag(cm.counts[:, :cm.k]).astype(float)
    predicted = cm.counts[:, :cm.k].sum(axis=0)
    rows = cm.counts.sum(axis=1)
    out = []
    for c in range(cm.k):
        p = 100.0 * diag[c] / predicted[c] if predicted[c] else 0.0
        r = 100.0 * diag[c] / rows[c] if rows[c] else 0.0
        out.append((p, r, f1_from(p, r)))
    return out


def macro_f1(cm: ConfusionMatrix) -> float:
    return float(np.mean([f for _, _, f in per_class_prf(cm)]))


# -- concepts --------------------------------------------------------------
@dataclass
class ConceptScore:
    name: str
    bacc: float
    f1: float
    sensitivity: float
    specificity: float
    positives: int
    negatives: int


def multilabel_concept_metrics(pred, true, names: Sequence[str] = KINDS) -> tuple[list[ConceptScore], float, float]:
    """Per-concept binary BACC and F1 (percent) plus their unweighted means over concepts.

    A concept with no positives in truth is scored by specificity alone (and with no
    negatives, by sensitivity alone).
    """
    pred = np.asarray(pred, dtype=bool)
    true = np.asarray(true, dtype=bool)
    if pred.shape != true.shape:
        raise MetricError(f"prediction flags {pred.shape} and truth flags {true.shape} differ in shape")
    if true.ndim != 2 or true.shape[1] != len(names):
        raise MetricError(f"expected (n, {len(names)}) flag arrays, got {true.shape}")
    scores = []
    for k, name in enumerate(names):
        t, p = true[:, k], pred[:, k]
        pos, neg = int(t.sum()), int((~t).sum())
        if pos == 0 and neg == 0:
            raise MetricError(f"concept {name!r} has neither positives nor negatives")
        tp, fp, fn = int((p & t).sum()), int((p & ~t).sum()), int((~p & t).sum())
        sens = tp / pos if pos else None
        spec = int((~p & ~t).sum()) / neg if neg else None
        parts = [x for x in (sens, spec) if x is not None]
        bacc = 100.0 * sum(parts) / len(parts)
        f1 = 100.0 * 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        scores.append(ConceptScore(name, bacc, f1, 100.0 * (sens or 0.0), 100.0 * (spec or 0.0), pos, neg))
    return scores, float(np.mean([s.bacc for s in scores])), float(np.mean([s.f1 for s in scores]))


# -- reports ---------------------------------------------------------------
@dataclass
class MetricsReport:
    task: str
    n: int
    seed: int = 0
    variant: str = "full"
    bacc: float = 0.0
    f1: float = 0.0
    per_grade: list | None = None
    confusion: list | None = None
    per_concept: list | None = None
    invalid: int = 0
    averaging: str = "macro"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"task: {self.task}   variant: {self.variant}   seed: {self.seed}   samples: {self.n}   "
                 f"invalid outputs: {self.invalid}",
                 f"{'BACC':>8} {'F1 (' + self.averaging + ')':>14}",
                 f"{self.bacc:8.2f} {self.f1:14.2f}", ""]
        if self.per_grade is not None:
            lines.append(f"{'Severity grade':<18}{'Precision':>10}{'Recall':>10}{'F1':>10}")
            for name, (p, r, f) in zip(GRADE_NAMES, self.per_grade):
                lines.append(f"{name:<18}{p:10.1f}{r:10.1f}{f:10.1f}")
            lines.append("")
            lines.append("confusion (rows true, columns predicted, last column invalid)")
            for row in self.confusion:
                lines.append(" ".join(f"{v:5d}" for v in row))
        if self.per_concept is not None:
            lines.append(f"{'Concept':<22}{'BACC':>8}{'F1':>8}{'Sens':>8}{'Spec':>8}")
            for c in self.per_concept:
                lines.append(f"{c['name']:<22}{c['bacc']:8.1f}{c['f1']:8.1f}{c['sensitivity']:8.1f}"
                             f"{c['specificity']:8.1f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str | None = None) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or f"metrics_{self.task}"
        (out / f"{stem}.json").write_text(self.to_json() + "\n")
        (out / f"{stem}.txt").write_text(self.to_text())


def diagnosis_report(cm: ConfusionMatrix, seed: int = 0, variant: str = "full") -> MetricsReport:
    return MetricsReport("diagnosis", cm.total(), seed, variant, balanced_accuracy(cm), macro_f1(cm),
                         per_grade=[list(x) for x in per_class_prf(cm)], confusion=cm.counts.tolist(),
                         invalid=int(cm.counts[:, cm.k].sum()))


def concept_report(pred, true, invalid: int, seed: int = 0, variant: str = "full") -> MetricsReport:
    scores, bacc, f1 = multilabel_concept_metrics(pred, true)
    return MetricsReport("concept", len(true), seed, variant, bacc, f1,
                         per_concept=[asdict(s) for s in scores], invalid=invalid)


# -- model evaluation ------------------------------------------------------
# A generator maps (images, task) to one text per image.  ``task`` is "diagnosis" or "concept".
TextGenerator = Callable[[np.ndarray, str], list]


@dataclass
class Prediction:
    id: str
    task: str
    text: str
    valid: bool
    parsed_grade: int | None
    parsed_concepts: list[str]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _parse(text: str, task: str, combined: bool) -> ParseResult:
    if combined:
        rep, con = parse_combined(text)
        return rep if task == "diagnosis" else con
    return parse_report(text) if task == "diagnosis" else parse_concept_answer(text)


@dataclass
class ChunkResult:
    cm: ConfusionMatrix
    flags: np.ndarray
    predictions: list[Prediction] = field(default_factory=list)


def _eval_chunk(generator: TextGenerator, samples, task: str, combined: bool) -> ChunkResult:
    texts = generator(np.stack([s.image for s in samples]), task)
    cm = ConfusionMatrix()
    flags = np.zeros((len(samples), len(KINDS)), dtype=bool)
    preds = []
    for i, (s, text) in enumerate(zip(samples, texts)):
        res = _parse(text, task, combined)
        if task == "diagnosis":
            # partial credit: an intact diagnosis sentence still yields a grade
            cm.add(s.grade, res.grade)
        elif res.valid:
            flags[i] = res.concept_flags()
        preds.append(Prediction(s.id, task, text, res.valid, res.grade,
                                sorted(res.concepts, key=KINDS.index) if res.valid else []))
    return ChunkResult(cm, flags, preds)


def evaluate_model(generator: TextGenerator, testset, task: str, combined: bool = False, chunk: int = 64,
                   workers: int = 1, seed: int = 0, variant: str = "full") -> tuple[MetricsReport, list[Prediction]]:
    """Generate, parse and score ``task`` over ``testset``.

    Samples are processed in fixed chunks; with ``workers > 1`` chunks run on a
    thread pool and are merged in chunk order, so results do not depend on it.
    """
    if task not in ("diagnosis", "concept"):
        raise ValueError(f"unknown task {task!r}")
    testset = list(testset)
    if not testset:
        raise ValueError("empty test set")
    chunks = [testset[i:i + chunk] for i in range(0, len(testset), chunk)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: _eval_chunk(generator, c, task, combined), chunks))
    else:
        results = [_eval_chunk(generator, c, task, combined) for c in chunks]
    preds = [p for r in results for p in r.predictions]
    if task == "diagnosis":
        cm = ConfusionMatrix()
        for r in results:
            cm = cm.merge(r.cm)
        return diagnosis_report(cm, seed, variant), preds
    flags = np.concatenate([r.flags for r in results])
    truth = np.array([s.concepts for s in testset], dtype=bool)
    invalid = sum(not p.valid for p in preds)
    return concept_report(flags, truth, invalid, seed, variant), preds


def write_predictions(path, predictions: list[Prediction]) -> None:
    with open(path, "w") as fh:
        for p in predictions:
            fh.write(p.to_json() + "\n")


def oracle_generator(samples) -> TextGenerator:
    """Emits the rendered ground truth; images are matched back to samples by content."""
    table = {s.image.tobytes(): s for s in samples}

    def gen(images, task):
        out = []
        for img in images:
            s = table[np.ascontiguousarray(img).tobytes()]
            out.append(report_for_sample(s) if task == "diagnosis" else concept_answer_for_sample(s))
        return out

    return gen


def constant_generator(text: str) -> TextGenerator:
    return lambda images, task: [text] * len(images)


# -- human ratings ---------------------------------------------------------
@dataclass(frozen=True)
class RatingRecord:
    rater_id: str
    sample_id: str
    fluency: float
    accuracy_of_explanation: float
    clinical_utility: float


@dataclass
class RatingSummary:
    means: dict
    per_rater: dict
    n: int

    def to_text(self) -> str:
        lines = [f"{'':<16}" + "".join(f"{a:>26}" for a in RATING_AXES),
                 f"{'all raters':<16}" + "".join(f"{self.means[a]:26.1f}" for a in RATING_AXES)]
        for r in sorted(self.per_rater):
            lines.append(f"{r:<16}" + "".join(f"{self.per_rater[r][a]:26.1f}" for a in RATING_AXES))
        return "\n".join(lines) + "\n"


def aggregate_ratings(records: Sequence[RatingRecord]) -> RatingSummary:
    """Unweighted per-axis means over all records, plus a per-rater breakdown."""
    if not records:
        raise MetricError("no rating records")
    seen = set()
    for rec in records:
        key = (rec.rater_id, rec.sample_id)
        if key in seen:
            raise MetricError(f"duplicate rating for rater {rec.rater_id!r}, sample {rec.sample_id!r}")
        seen.add(key)
        for a in RATING_AXES:
            v = getattr(rec, a)
            if not (math.isfinite(v) and 0.0 <= v <= 100.0):
                raise MetricError(f"{a} score {v} out of range [0, 100] (rater {rec.rater_id!r}, "
                                  f"sample {rec.sample_id!r})")
    # math.fsum keeps the mean independent of record order
    means = {a: math.fsum(getattr(r, a) for r in records) / len(records) for a in RATING_AXES}
    per_rater = {}
    for rid in sorted({r.rater_id for r in records}):
        mine = [r for r in records if r.rater_id == rid]
        per_rater[rid] = {a: math.fsum(getattr(r, a) for r in mine) / len(mine) for a in RATING_AXES}
    return RatingSummary(means, per_rater, len(records))


def read_ratings_csv(path) -> list[RatingRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["rater_id", "sample_id", *RATING_AXES]
        if reader.fieldnames != expected:
            raise MetricError(f"ratings header must be {','.join(expected)}, got {reader.fieldnames}")
        out = []
        for line, row in enumerate(reader, start=2):
            try:
                out.append(RatingRecord(row["rater_id"], row["sample_id"],
                                        *(float(row[a]) for a in RATING_AXES)))
            except (TypeError, ValueError) as e:
                raise MetricError(f"line {line}: {e}") from None
    return out


__all__ = [
    "ConfusionMatrix", "MetricsReport", "RatingRecord", "RatingSummary", "Prediction", "balanced_accuracy",
    "per_class_prf", "macro_f1", "f1_from", "multilabel_concept_metrics", "evaluate_model", "aggregate_ratings",
    "read_ratings_csv", "write_predictions", "oracle_generator", "constant_generator", "GRADE_PHRASES",
]

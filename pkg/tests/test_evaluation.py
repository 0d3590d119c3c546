from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xdrlvlm.evaluation import (
    ConfusionMatrix,
    MetricError,
    RatingRecord,
    aggregate_ratings,
    balanced_accuracy,
    concept_report,
    constant_generator,
    diagnosis_report,
    evaluate_model,
    f1_from,
    macro_f1,
    multilabel_concept_metrics,
    oracle_generator,
    per_class_prf,
    read_ratings_csv,
    write_predictions,
)
from xdrlvlm.reportgen import enumerate_valid, render_report
from xdrlvlm.synthfundus import DatasetConfig, build_samples


@pytest.fixture(scope="module")
def testset():
    return build_samples(DatasetConfig(counts=(4,) * 5, seed=9))


def test_balanced_accuracy_oracles():
    assert balanced_accuracy(ConfusionMatrix(5, np.hstack([np.eye(5, dtype=int) * 3, np.zeros((5, 1), int)]))) == 100
    cm = ConfusionMatrix(2, [[4, 0, 0], [1, 0, 1]])
    assert balanced_accuracy(cm) == 50.0
    cm = ConfusionMatrix(2, [[2, 0, 0], [1, 1, 0]])
    assert balanced_accuracy(cm) == 75.0
    with pytest.raises(MetricError, match="class 1"):
        balanced_accuracy(ConfusionMatrix(2, [[1, 0, 0], [0, 0, 0]]))


def test_invalid_column_counts_as_miss_and_kills_precision_nothing_else():
    cm = ConfusionMatrix.from_pairs([0, 0, 1, 1], [0, None, 1, None], k=2)
    assert cm.counts.tolist() == [[1, 0, 1], [0, 1, 1]]
    (p0, r0, _), (p1, r1, _) = per_class_prf(cm)
    assert (p0, r0, p1, r1) == (100.0, 50.0, 100.0, 50.0)


PUBLISHED = {"No DR": (90.1, 92.5, 91.3), "Mild DR": (78.5, 75.0, 76.7), "Moderate DR": (83.2, 85.1, 84.1),
             "Severe DR": (70.5, 68.9, 69.7), "Proliferative DR": (85.0, 87.2, 86.1)}


def test_per_class_f1_reproduces_published_rows():
    rows = per_class_prf(np.array([(p, r) for p, r, _ in PUBLISHED.values()]))
    for (_, _, f), (_, _, want) in zip(rows, PUBLISHED.values()):
        assert round(f, 1) == want


def test_f1_fixed_point_and_bounds():
    assert f1_from(60.0, 60.0) == pytest.approx(60.0)
    assert f1_from(0.0, 0.0) == 0.0
    with pytest.raises(MetricError):
        per_class_prf(np.array([[101.0, 50.0]]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.one_of(st.none(), st.integers(0, 4))), min_size=5, max_size=80))
def test_metrics_stay_in_range(pairs):
    true = [t for t, _ in pairs] + list(range(5))
    pred = [p for _, p in pairs] + list(range(5))
    cm = ConfusionMatrix.from_pairs(true, pred)
    assert 0.0 <= balanced_accuracy(cm) <= 100.0
    assert 0.0 <= macro_f1(cm) <= 100.0
    for p, r, f in per_class_prf(cm):
        assert min(p, r) - 1e-9 <= f <= max(p, r) + 1e-9


def test_multilabel_oracles():
    truth = np.array([[1, 0, 1, 0, 0, 1], [0, 1, 1, 0, 1, 0], [1, 1, 0, 1, 0, 0]], dtype=bool)
    _, bacc, f1 = multilabel_concept_metrics(truth, truth)
    assert bacc == 100.0 and f1 == 100.0
    scores, bacc, f1 = multilabel_concept_metrics(np.zeros_like(truth), truth)
    assert bacc == 50.0 and f1 == 0.0
    assert scores[0].sensitivity == 0.0 and scores[0].specificity == 100.0
    with pytest.raises(MetricError):
        multilabel_concept_metrics(truth[:, :5], truth[:, :5])


def test_no_positive_concept_scored_by_specificity():
    truth = np.zeros((4, 6), dtype=bool)
    truth[:, 0] = True
    pred = truth.copy()
    pred[0, 3] = True
    scores, _, _ = multilabel_concept_metrics(pred, truth)
    assert scores[3].bacc == 75.0 and scores[0].bacc == 100.0


def test_oracle_generator_scores_perfectly(testset):
    for task in ("diagnosis", "concept"):
        rep, preds = evaluate_model(oracle_generator(testset), testset, task)
        assert rep.bacc == 100.0 and rep.invalid == 0 and all(p.valid for p in preds)
        if task == "diagnosis":
            assert rep.f1 == 100.0


def test_gibberish_generator_policy(testset):
    d, _ = evaluate_model(constant_generator("hello"), testset, "diagnosis")
    c, _ = evaluate_model(constant_generator("hello"), testset, "concept")
    assert d.bacc == 0.0 and d.invalid == len(testset)
    assert c.bacc == 50.0 and c.invalid == len(testset)


def test_random_valid_reports_score_chance(testset):
    rendered = {}
    for g, f in enumerate_valid(max_findings=1):
        rendered.setdefault(g, render_report(g, f))
    baccs = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        gen = lambda images, task: [rendered[int(rng.integers(5))] for _ in images]  # noqa: E731
        baccs.append(evaluate_model(gen, testset, "diagnosis", chunk=7)[0].bacc)
    assert abs(np.mean(baccs) - 20.0) <= 10.0


def test_parallel_and_sequential_evaluation_agree(testset):
    rng_free = oracle_generator(testset)
    a, _ = evaluate_model(rng_free, testset, "diagnosis", chunk=3, workers=1)
    b, _ = evaluate_model(rng_free, testset, "diagnosis", chunk=3, workers=4)
    assert a.confusion == b.confusion and a.to_json() == b.to_json()


def test_report_files(tmp_path, testset):
    rep, preds = evaluate_model(oracle_generator(testset), testset, "diagnosis", seed=2, variant="full")
    rep.write(tmp_path, "m")
    assert json.loads((tmp_path / "m.json").read_text())["bacc"] == 100.0
    text = (tmp_path / "m.txt").read_text()
    assert "Proliferative DR" in text and "invalid" in text
    write_predictions(tmp_path / "p.jsonl", preds)
    rows = [json.loads(x) for x in (tmp_path / "p.jsonl").read_text().splitlines()]
    assert set(rows[0]) == {"id", "task", "text", "valid", "parsed_grade", "parsed_concepts"}


def test_report_builders():
    cm = ConfusionMatrix.from_pairs(range(5), range(5))
    assert diagnosis_report(cm).per_grade[0] == [100.0, 100.0, 100.0]
    t = np.eye(6, dtype=bool)
    assert concept_report(t, t, invalid=0).bacc == 100.0


# -- ratings ---------------------------------------------------------------
def test_rating_oracles():
    s = aggregate_ratings([RatingRecord("r1", "s1", 90, 85, 80)])
    assert s.means == {"fluency": 90, "accuracy_of_explanation": 85, "clinical_utility": 80}
    s = aggregate_ratings([RatingRecord("a", "s1", 100, 50, 50), RatingRecord("b", "s1", 80, 50, 50)])
    assert s.means["fluency"] == 90 and s.per_rater["a"]["fluency"] == 100


def test_rating_errors():
    with pytest.raises(MetricError, match="duplicate"):
        aggregate_ratings([RatingRecord("a", "s", 1, 1, 1), RatingRecord("a", "s", 2, 2, 2)])
    with pytest.raises(MetricError, match="range"):
        aggregate_ratings([RatingRecord("a", "s", 101, 1, 1)])
    with pytest.raises(MetricError):
        aggregate_ratings([])


def test_ratings_csv(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("rater_id,sample_id,fluency,accuracy_of_explanation,clinical_utility\nr1,s1,90,85,80\n")
    assert aggregate_ratings(read_ratings_csv(p)).means["clinical_utility"] == 80
    p.write_text("rater,sample,fluency\n")
    with pytest.raises(MetricError, match="header"):
        read_ratings_csv(p)
    p.write_text("rater_id,sample_id,fluency,accuracy_of_explanation,clinical_utility\nr1,s1,x,85,80\n")
    with pytest.raises(MetricError, match="line 2"):
        read_ratings_csv(p)

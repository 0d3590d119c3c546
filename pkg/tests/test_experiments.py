from __future__ import annotations

import json
from dataclasses import fields

import pytest

from xdrlvlm.evaluation import MetricsReport
from xdrlvlm.experiments import (
    VARIANTS,
    ConfigError,
    ExperimentConfig,
    PipelineError,
    RunRecord,
    emit_tables,
    load_config,
    parse_overrides,
    run_ablation_suite,
    run_pipeline,
    variant_diff,
)
from xdrlvlm.experiments.cli import main
from xdrlvlm.experiments.config import VARIANT_FIELDS
from xdrlvlm.experiments.pipeline import STALE_MARKER, evaluate_run_dir

# 200 samples, short stages; small enough for a smoke run
SMOKE = ExperimentConfig(data_counts=(40,) * 5, pretrain_epochs=1, stage1_epochs=3, stage2_epochs=3, max_len=60)
TINY = SMOKE.replace(data_counts=(5,) * 5, stage1_epochs=1, stage2_epochs=1, max_len=12)


# -- config ----------------------------------------------------------------
def test_variant_isolation():
    base = ExperimentConfig()
    for a in VARIANTS:
        for b in VARIANTS:
            diff = variant_diff(base.with_variant(a), base.with_variant(b))
            allowed = {"variant"} | set(VARIANT_FIELDS[a]) | set(VARIANT_FIELDS[b])
            assert set(diff) <= allowed
            assert (a == b) == (not diff)
    assert set(variant_diff(base, base.with_variant("no_multistage"))) == {"variant", "stage1_enabled"}


def test_variant_flags_are_enforced():
    with pytest.raises(ConfigError, match="requires"):
        ExperimentConfig(variant="no_multistage")
    with pytest.raises(ConfigError):
        ExperimentConfig(variant="no_decoder")
    with pytest.raises(ConfigError):
        ExperimentConfig(test_fraction=1.0)


def test_flat_config_round_trip(tmp_path):
    cfg = ExperimentConfig().with_variant("no_multitask_prompts").replace(seed=4, data_counts=(1, 2, 3, 4, 5))
    p = tmp_path / "c.txt"
    p.write_text(cfg.to_flat())
    assert load_config(p) == cfg
    assert load_config(p).digest() == cfg.digest()


def test_overrides():
    cfg = parse_overrides(["# comment", "", "variant = no_medical_encoder", "stage2_epochs=7  # trailing"])
    assert cfg.encoder_init == "generic" and cfg.stage2_epochs == 7
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_overrides(["nope=1"])
    with pytest.raises(ConfigError, match="bad value"):
        parse_overrides(["stage1_enabled=maybe"])
    with pytest.raises(ConfigError, match="key=value"):
        parse_overrides(["seed"])


def test_config_covers_every_documented_knob():
    names = {f.name for f in fields(ExperimentConfig)}
    for need in ("data_counts", "data_seed", "hemorrhage_threshold", "stage1_tau", "stage1_lr", "stage1_epochs",
                 "stage2_epochs", "stage2_lr", "stage2_lr_min", "prompt_mode", "freeze_encoder", "variant", "seed"):
        assert need in names


# -- pipeline --------------------------------------------------------------
@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    return out, run_pipeline(SMOKE, out)


def test_smoke_run_emits_everything(smoke_run):
    out, rec = smoke_run
    for name in ("config.txt", "run_record.json", "predictions.jsonl", "metrics_diagnosis.json",
                 "metrics_diagnosis.txt", "metrics_concept.json", "metrics_concept.txt", "stage1_loss.txt",
                 "stage2_loss.txt", "data/manifest.jsonl", "checkpoint/decoder.xdrw", "checkpoint/encoder.xdrw",
                 "checkpoint/connector.xdrw", "checkpoint/vocab.txt"):
        assert (out / name).exists(), name
    assert not (out / STALE_MARKER).exists()
    assert len(list((out / "data/images").glob("*.ppm"))) == 200
    assert rec.metrics["diagnosis"].n == 40 and rec.stage1_steps > 0 and rec.stage2_steps > 0
    assert len((out / "predictions.jsonl").read_text().splitlines()) == 80
    back = RunRecord.load(out / "run_record.json")
    assert back.metrics["diagnosis"].to_json() == rec.metrics["diagnosis"].to_json()


def test_run_directory_is_self_contained(smoke_run, tmp_path):
    out, rec = smoke_run
    again = evaluate_run_dir(out, out_dir=tmp_path)
    for task in ("diagnosis", "concept"):
        assert again[task].to_json() == rec.metrics[task].to_json()
        assert (tmp_path / f"metrics_{task}.json").read_bytes() == (out / f"metrics_{task}.json").read_bytes()


def test_same_config_reproduces_metrics(tmp_path):
    a = run_pipeline(TINY, tmp_path / "a")
    b = run_pipeline(TINY, tmp_path / "b")
    for task in ("diagnosis", "concept"):
        assert (tmp_path / "a" / f"metrics_{task}.json").read_bytes() == \
            (tmp_path / "b" / f"metrics_{task}.json").read_bytes()
    assert a.input_hash == b.input_hash
    assert run_pipeline(TINY.replace(seed=1), None).input_hash != a.input_hash


def test_no_multistage_records_zero_stage1_steps():
    rec = run_pipeline(TINY.with_variant("no_multistage"), None)
    assert rec.stage1_steps == 0 and "stage1" not in rec.losses


def test_generic_prompt_variant_scores_both_tasks():
    rec = run_pipeline(TINY.with_variant("no_multitask_prompts"), None)
    assert set(rec.metrics) == {"diagnosis", "concept"}


def test_stage_failure_is_tagged_and_leaves_stale_marker(tmp_path):
    bad = TINY.replace(stage2_lr=-1.0)
    with pytest.raises(PipelineError) as err:
        run_pipeline(bad, tmp_path)
    assert err.value.stage == "stage2"
    assert (tmp_path / STALE_MARKER).exists()
    with pytest.raises(PipelineError, match="stale"):
        evaluate_run_dir(tmp_path)


def test_ablation_suite_one_seed(tmp_path):
    res = run_ablation_suite(TINY, [0], tmp_path)
    assert sorted(res.records) == sorted((v, 0) for v in VARIANTS)
    header = (tmp_path / "ablation.csv").read_text().splitlines()[0]
    assert header == "variant,diag BACC,diag F1,concept BACC,concept F1"
    assert len(res.means()) == 4
    with pytest.raises(ValueError):
        run_ablation_suite(TINY, [])


# -- tables ----------------------------------------------------------------
def _record(bacc=91.28, f1=80.0):
    per_grade = [[90.0, 92.5, 91.28]] * 5
    per_concept = [{"name": n, "bacc": 77.77, "f1": 66.66, "sensitivity": 0, "specificity": 0, "positives": 1,
                    "negatives": 1} for n in ("microaneurysm", "hemorrhage", "hard_exudate", "soft_exudate",
                                              "neovascularization", "irma")]
    metrics = {"diagnosis": MetricsReport("diagnosis", 10, bacc=bacc, f1=f1, per_grade=per_grade),
               "concept": MetricsReport("concept", 10, bacc=77.95, f1=66.88, per_concept=per_concept)}
    return RunRecord(ExperimentConfig().to_dict(), "h", 1, 1, {}, metrics, 1.0)


def test_tables_rounding_and_reference(tmp_path):
    emit_tables([_record()], tmp_path, reference=True)
    diag = (tmp_path / "table_diagnosis.csv").read_text().splitlines()
    assert diag[1] == "ours (full, seed 0),91.28,80.00"
    assert diag[2] == "published (not reproduced),84.55,79.92"
    grades = (tmp_path / "table_per_grade_full_seed0.csv").read_text().splitlines()
    assert grades[1] == "No DR,90.0,92.5,91.3"
    emit_tables([_record()], tmp_path / "plain")
    assert "published" not in (tmp_path / "plain" / "table_diagnosis.txt").read_text()


def test_tables_name_the_missing_metric(tmp_path):
    rec = _record()
    rec.metrics["concept"].per_concept = None
    with pytest.raises(KeyError, match="concept.per_concept"):
        emit_tables([rec], tmp_path)
    del rec.metrics["diagnosis"]
    with pytest.raises(KeyError, match="diagnosis.bacc"):
        emit_tables([rec], tmp_path)


# -- command line ----------------------------------------------------------
def _write_tiny_config(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY.to_flat())
    return p


def test_cli_run_eval_and_tables(tmp_path, capsys):
    cfg = _write_tiny_config(tmp_path)
    run = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--out", str(run), "--seed", "2"]) == 0
    rec = json.loads((run / "run_record.json").read_text())
    assert rec["config"]["seed"] == 2
    assert main(["eval", str(run), "--out", str(tmp_path / "re")]) == 0
    assert (tmp_path / "re/metrics_diagnosis.json").read_bytes() == (run / "metrics_diagnosis.json").read_bytes()
    assert main(["emit-tables", str(run), "--reference", "--out", str(tmp_path / "tables")]) == 0
    assert "84.55" in (tmp_path / "tables/table_diagnosis.txt").read_text()
    capsys.readouterr()


def test_cli_stagewise_commands(tmp_path, capsys):
    cfg = _write_tiny_config(tmp_path)
    assert main(["--config", str(cfg), "gen-data", "--out", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d/data/manifest.jsonl").exists()
    assert main(["train-align", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["train-instruct", "--config", str(cfg), "--from", str(tmp_path / "a"),
                 "--out", str(tmp_path / "i")]) == 0
    assert (tmp_path / "i/metrics_concept.json").exists()
    assert main(["train-align", "--config", str(cfg), "--variant", "no_multistage",
                 "--out", str(tmp_path / "n")]) == 0
    assert "skipped" in capsys.readouterr().out


def test_cli_ratings_and_errors(tmp_path, capsys):
    csv = tmp_path / "r.csv"
    csv.write_text("rater_id,sample_id,fluency,accuracy_of_explanation,clinical_utility\n"
                   "a,s1,100,50,60\nb,s1,80,70,60\n")
    assert main(["aggregate-ratings", str(csv), "--out", str(tmp_path)]) == 0
    assert "90.0" in capsys.readouterr().out
    csv.write_text("rater_id,sample_id,fluency,accuracy_of_explanation,clinical_utility\na,s1,1,1,1\na,s1,2,2,2\n")
    assert main(["aggregate-ratings", str(csv), "--out", str(tmp_path)]) == 1
    assert "error [ratings]" in capsys.readouterr().err
    assert main(["eval", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 1
    assert "error [eval]" in capsys.readouterr().err
    bad = tmp_path / "bad.cfg"
    bad.write_text("stage2_lr=-1\n" + "data_counts=5,5,5,5,5\nstage1_epochs=0\npretrain_epochs=0\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert "error [stage2]" in capsys.readouterr().err
    bad.write_text("nope=1\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2

"""Command line front end: ``xdrlvlm <subcommand> [--config PATH] [--seed N] [--out DIR] [--variant NAME]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..evaluation import aggregate_ratings, read_ratings_csv
from ..lvlm.training import LVLM
from .config import VARIANTS, ConfigError, ExperimentConfig, load_config
from .pipeline import (PipelineError, RunRecord, _stage1, _stage2, _stage_data, _stage_encoder, _stage_eval,
                       build_model, emit_tables, evaluate_run_dir, run_ablation_suite, run_pipeline)

log = logging.getLogger("xdrlvlm")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=d, help="flat key=value config file")
    p.add_argument("--seed", type=int, metavar="N", default=d, help="global seed (overrides config)")
    p.add_argument("--out", metavar="DIR", default=d if suppress else "runs/out", help="output directory")
    p.add_argument("--variant", choices=VARIANTS, default=d, help="pipeline variant (overrides config)")
    p.add_argument("-v", "--verbose", action="store_true", default=d if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="xdrlvlm", description="desk-scale explainable DR report generation")
    _global_flags(ap, suppress=False)
    sub = ap.add_subparsers(dest="cmd", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        return p

    add("gen-data", "render the synthetic dataset with its split manifest")
    add("train-align", "encoder init plus Stage-1 contrastive alignment; saves a checkpoint")
    p = add("train-instruct", "Stage-2 instruction tuning from a checkpoint (or fresh weights)")
    p.add_argument("--from", dest="from_dir", metavar="DIR", help="checkpoint directory from train-align")
    add("run", "full pipeline for one variant and seed")
    p = add("ablate", "all four variants over several seeds")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p = add("eval", "re-score a finished run directory from its own checkpoint and images")
    p.add_argument("run_dir")
    p.add_argument("--workers", type=int, default=1)
    p = add("aggregate-ratings", "per-axis means of a clinician-style ratings CSV")
    p.add_argument("csv")
    p = add("emit-tables", "write table files from finished run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--reference", action="store_true", help="add the published numbers as a labelled row")
    p.add_argument("--ratings", metavar="CSV")
    return ap


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.variant:
        cfg = cfg.with_variant(args.variant)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _cmd_gen_data(cfg, out: Path, args) -> None:
    train, test, digest = _stage_data(cfg, out)
    print(f"wrote {len(train)} train / {len(test)} test samples to {out / 'data'} (manifest sha256 {digest[:12]})")


def _cmd_train_align(cfg, out: Path, args) -> None:
    train, _, _ = _stage_data(cfg, out)
    enc, _ = _stage_encoder(cfg, train, None)
    model = build_model(cfg, enc)
    if cfg.stage1_enabled:
        r = _stage1(cfg, model, train)
        r.write_curve(out / "stage1_loss.txt")
        print(f"stage 1: {r.steps} steps, retrieval@1 {r.retrieval_before:.3f} -> {r.retrieval_after:.3f}")
    else:
        print("stage 1 skipped for variant no_multistage")
    model.save(out / "checkpoint")


def _cmd_train_instruct(cfg, out: Path, args) -> None:
    train, test, _ = _stage_data(cfg, out)
    if args.from_dir:
        try:
            model = LVLM.load(Path(args.from_dir) / "checkpoint" if (Path(args.from_dir) / "checkpoint").is_dir()
                              else args.from_dir)
        except Exception as e:  # noqa: BLE001
            raise PipelineError("stage2", e) from e
    else:
        model = build_model(cfg, _stage_encoder(cfg, train, None)[0])
    r = _stage2(cfg, model, train)
    r.write_curve(out / "stage2_loss.txt")
    model.save(out / "checkpoint")
    metrics = _stage_eval(cfg, model, test, out)
    for task, rep in metrics.items():
        print(f"{task}: BACC {rep.bacc:.2f}  F1 {rep.f1:.2f}")


def _cmd_run(cfg, out: Path, args) -> None:
    rec = run_pipeline(cfg, out)
    for task, rep in rec.metrics.items():
        print(f"{task}: BACC {rep.bacc:.2f}  F1 {rep.f1:.2f}")
    print(f"run record: {out / 'run_record.json'} ({rec.seconds:.1f} s)")


def _cmd_ablate(cfg, out: Path, args) -> None:
    res = run_ablation_suite(cfg, args.seeds, out)
    print(res.table(), end="")


def _cmd_eval(cfg, out: Path, args) -> None:
    metrics = evaluate_run_dir(args.run_dir, workers=args.workers, out_dir=out)
    for rep in metrics.values():
        print(rep.to_text())


def _cmd_ratings(cfg, out: Path, args) -> None:
    try:
        summary = aggregate_ratings(read_ratings_csv(args.csv))
    except Exception as e:  # noqa: BLE001
        raise PipelineError("ratings", e) from e
    (out / "ratings.txt").write_text(summary.to_text())
    print(summary.to_text(), end="")


def _cmd_emit(cfg, out: Path, args) -> None:
    try:
        records = [RunRecord.load(Path(d) / "run_record.json") for d in args.run_dirs]
        ratings = aggregate_ratings(read_ratings_csv(args.ratings)) if args.ratings else None
        paths = emit_tables(records, out, reference=args.reference, ratings=ratings)
    except Exception as e:  # noqa: BLE001
        raise PipelineError("emit-tables", e) from e
    for p in paths:
        print(p)


COMMANDS = {"gen-data": _cmd_gen_data, "train-align": _cmd_train_align, "train-instruct": _cmd_train_instruct,
            "run": _cmd_run, "ablate": _cmd_ablate, "eval": _cmd_eval, "aggregate-ratings": _cmd_ratings,
            "emit-tables": _cmd_emit}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as e:
        print(f"error [config]: {e}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        COMMANDS[args.cmd](cfg, out, args)
    except PipelineError as e:
        print(f"error [{e.stage}]: {e.cause}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("error [interrupted]", file=sys.stderr)
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Experiment configuration, the end-to-end pipeline and its command line."""

from .config import VARIANTS, ConfigError, ExperimentConfig, load_config, parse_overrides, variant_diff
from .pipeline import (AblationResult, PipelineError, RunRecord, emit_tables, run_ablation_suite,
                       run_pipeline)

__all__ = ["VARIANTS", "ConfigError", "ExperimentConfig", "load_config", "parse_overrides", "variant_diff",
           "AblationResult", "PipelineError", "RunRecord", "emit_tables", "run_ablation_suite", "run_pipeline"]

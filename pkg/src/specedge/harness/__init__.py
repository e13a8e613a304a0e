"""Experiment orchestration: decoding studies, training, evaluation, sweeps and reports."""

from .experiments import (
    ConfigError,
    DecodeProfile,
    DecodeStudyConfig,
    ExperimentSpec,
    PolicyRunner,
    TrainSpec,
    improvement,
    load_spec,
    make_runner,
    per_seed,
    report,
    rollout,
    run_decoding_study,
    run_energy_sweep,
    run_training,
    run_uara_eval,
    spec_from_dict,
    summarize,
)
from .metrics import FIELDS, SCHEMA_VERSION, MetricsRow, mean_ci, read_rows, rows_to_csv, write_rows

__all__ = [
    "FIELDS", "SCHEMA_VERSION", "ConfigError", "DecodeProfile", "DecodeStudyConfig", "ExperimentSpec",
    "MetricsRow", "PolicyRunner", "TrainSpec", "improvement", "load_spec", "make_runner", "mean_ci", "per_seed",
    "read_rows", "report", "rollout", "rows_to_csv", "run_decoding_study", "run_energy_sweep", "run_training",
    "run_uara_eval", "spec_from_dict", "summarize", "write_rows",
]

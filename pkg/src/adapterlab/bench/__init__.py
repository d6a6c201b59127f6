"""Datasets, sweeps, metrics persistence and checkpoints."""

from .checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .config import (
    ExperimentConfig,
    SweepSpec,
    TaskConfig,
    TheoryConfig,
    apply_overrides,
    format_config,
    load_config,
    parse_config,
)
from .data import Dataset, PlantedShiftTask, deterministic_split, make_planted_task
from .idx import load_idx, write_idx
from .sweep import PreparedTask, SummaryRow, aggregate, prepare_task, rank_increments, run_one, run_sweep

__all__ = [
    "Dataset",
    "PlantedShiftTask",
    "deterministic_split",
    "make_planted_task",
    "load_idx",
    "write_idx",
    "encode_checkpoint",
    "decode_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "ExperimentConfig",
    "SweepSpec",
    "TaskConfig",
    "TheoryConfig",
    "parse_config",
    "load_config",
    "apply_overrides",
    "format_config",
    "PreparedTask",
    "prepare_task",
    "run_one",
    "run_sweep",
    "aggregate",
    "rank_increments",
    "SummaryRow",
]

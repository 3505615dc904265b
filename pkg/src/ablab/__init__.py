"""Desk-scale laboratory for AB training: low-rank, group-wise data parallelism."""

from .config import AbHyperparams, OptimizerConfig, RunConfig, RunMode
from .training import RunReport, Trainer, resolve_schedule, run_training

__all__ = [
    "AbHyperparams",
    "OptimizerConfig",
    "RunConfig",
    "RunMode",
    "RunReport",
    "Trainer",
    "resolve_schedule",
    "run_training",
]
__version__ = "0.1.0"

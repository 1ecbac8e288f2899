"""Entropy-trained flow proposals for MCMC, with classical baselines and
effective-sample-size diagnostics."""

__version__ = "0.1.0"

from .targets import (
    TargetDistribution,
    make_icg,
    make_scg,
    make_funnel,
    make_blr,
    load_dataset_csv,
    DatasetTable,
)
from .tape import Tape, Var, GradBundle, check_gradients

__all__ = [
    "TargetDistribution",
    "make_icg",
    "make_scg",
    "make_funnel",
    "make_blr",
    "load_dataset_csv",
    "DatasetTable",
    "Tape",
    "Var",
    "GradBundle",
    "check_gradients",
]

"""Proximal weighting estimators for left-truncated, right-censored survival data."""

from proxtrunc.data import ColumnSchema, Dataset, EstimandSpec, ObservedRecord, load_dataset
from proxtrunc.estimators import Estimate, estimate
from proxtrunc.survival import StepFunction

__all__ = [
    "ColumnSchema",
    "Dataset",
    "EstimandSpec",
    "Estimate",
    "ObservedRecord",
    "StepFunction",
    "estimate",
    "load_dataset",
]

__version__ = "0.1.0"

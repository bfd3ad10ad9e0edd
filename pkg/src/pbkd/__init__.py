"""Preference-based knowledge distillation on synthetic token-generation MDPs."""

from pbkd.errors import (
    CapExceeded,
    ConfigInvalid,
    DimensionMismatch,
    EmptyDataset,
    IncompatibleRuns,
    IterationOrderViolation,
    MalformedTrajectory,
    MissingOracle,
    NonFinite,
    NonPositivePoint,
    PbkdError,
    UnknownState,
)
from pbkd.seq_mdp import TokenMdp, Trajectory

__version__ = "0.1.0"

__all__ = [
    "CapExceeded",
    "ConfigInvalid",
    "DimensionMismatch",
    "EmptyDataset",
    "IncompatibleRuns",
    "IterationOrderViolation",
    "MalformedTrajectory",
    "MissingOracle",
    "NonFinite",
    "NonPositivePoint",
    "PbkdError",
    "TokenMdp",
    "Trajectory",
    "UnknownState",
]

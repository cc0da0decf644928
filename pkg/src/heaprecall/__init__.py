"""Recall-and-heaping model for retrospectively reported daily counts."""

from .model import (
    HeapingClass,
    InvalidThetaError,
    ModelSpec,
    ObservationDay,
    PriorConfig,
    SubjectRecord,
    Theta,
    coarsen,
    heaping_pmf,
    inverse_coarsen,
    log_obs_prob_given_effects,
    obs_prob_given_effects,
    recall_log_mean,
)

__version__ = "0.1.0"

__all__ = [
    "HeapingClass",
    "InvalidThetaError",
    "ModelSpec",
    "ObservationDay",
    "PriorConfig",
    "SubjectRecord",
    "Theta",
    "coarsen",
    "heaping_pmf",
    "inverse_coarsen",
    "log_obs_prob_given_effects",
    "obs_prob_given_effects",
    "recall_log_mean",
]

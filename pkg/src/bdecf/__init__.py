"""Bayesian deep ensemble collaborative filtering.

Two-tower recommenders with variational last layers, an attention matching
head, a stacked ensemble, uncertainty scores, and a leave-one-out ranking
harness. Numerical kernels use a compiled extension when built and fall
back to numpy otherwise (see :mod:`bdecf.kernels`).
"""

__version__ = "0.1.0"

from .bayes import BayesianLinear, PriorSpec, snr_prune, softplus  # noqa: E402
from .data import (RatingDataset, SplitPair, bootstrap, leave_one_out_split,  # noqa: E402
                   load_ratings, preprocess, sample_negatives, subset)
from .ensemble import EnsembleConfig, SuperModel, build_ensemble_config, train_supermodel  # noqa: E402
from .evaluation import MetricsReport, evaluate  # noqa: E402
from .model import LearnerConfig, WeakLearner, train_weak_learner  # noqa: E402

__all__ = [
    "BayesianLinear",
    "EnsembleConfig",
    "LearnerConfig",
    "MetricsReport",
    "PriorSpec",
    "RatingDataset",
    "SplitPair",
    "SuperModel",
    "WeakLearner",
    "bootstrap",
    "build_ensemble_config",
    "evaluate",
    "leave_one_out_split",
    "load_ratings",
    "preprocess",
    "sample_negatives",
    "snr_prune",
    "softplus",
    "subset",
    "train_supermodel",
    "train_weak_learner",
]

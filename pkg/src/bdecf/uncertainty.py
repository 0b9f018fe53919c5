"""Epistemic uncertainty: variance propagation and ensemble disagreement."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .bayes import BayesianLinear, snr_prune
from .data import SplitPair, sample_negatives
from .ensemble import SuperModel
from .model import WeakLearner
from .nn import SparseRows

METHODS = ("reparam", "ensemble")
DEFAULT_BIN_EDGES = (0, 22, 30, 40, 50, 75, 100, 150, 200, 300, 500)


@dataclass(frozen=True)
class ActivationStats:
    mean: np.ndarray
    var: np.ndarray


@dataclass(frozen=True)
class UncertaintyScoreParams:
    alpha: float = 10.0
    beta: float = 80.0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")


def activation_stats(layer: BayesianLinear, h) -> ActivationStats:
    """Exact mean and variance of ``h @ W + b`` under the layer's Gaussian posterior.

    Works on a single input vector or a batch of rows. The bias variance is
    included since biases are variational too.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != layer.in_dim:
        raise ValueError(f"expected input width {layer.in_dim}, got {h.shape[-1]}")
    sW, sb = (s.astype(np.float64) for s in layer.sigmas())
    mean = h @ layer.params["W_mu"].astype(np.float64) + layer.params["b_mu"]
    var = (h * h) @ (sW * sW) + sb * sb
    return ActivationStats(mean, var)


def uncertainty_score(var, params: UncertaintyScoreParams | None = None):
    """``alpha * log(1 + beta * v)``; ``v`` is the mean over the last axis for vectors."""
    params = params or UncertaintyScoreParams()
    v = np.asarray(var, dtype=np.float64)
    if np.any(v < 0):
        raise ValueError("variance must be non-negative")
    if v.ndim:
        v = v.mean(axis=-1)
    out = params.alpha * np.log1p(params.beta * v)
    return float(out) if np.ndim(out) == 0 else out


def ensemble_uncertainty(member_predictions):
    """Population standard deviation across the last axis (K members)."""
    z = np.asarray(member_predictions, dtype=np.float64)
    if z.shape[-1] < 2:
        raise ValueError("need at least two members")
    out = z.std(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def _learners(model):
    return model.learners if isinstance(model, SuperModel) else [model]


def user_scores(model, users, params=None):
    """Reparameterisation score of each user's embedding (mean over learners)."""
    users = np.asarray(users, dtype=np.int64)
    out = np.zeros(len(users))
    for m in _learners(model):
        h = m.user_tower.features(SparseRows(m.user_matrix, users))
        out += uncertainty_score(activation_stats(m.user_tower.bayes, h).var, params)
    return out / len(_learners(model))


def item_scores(model, items, params=None):
    items = np.asarray(items, dtype=np.int64)
    out = np.zeros(len(items))
    for m in _learners(model):
        h = m.item_tower.features(SparseRows(m.item_matrix, items))
        out += uncertainty_score(activation_stats(m.item_tower.bayes, h).var, params)
    return out / len(_learners(model))


@dataclass
class UncertaintyReport:
    method: str
    pairs: np.ndarray  # (n, 2) user, item
    scores: np.ndarray
    users: np.ndarray
    user_mean: np.ndarray
    user_count: np.ndarray
    user_std: np.ndarray
    ratios: dict = field(default_factory=dict)
    curve: list = field(default_factory=list)

    def write_pairs_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user", "item", "method", "score"])
            for (u, i), s in zip(self.pairs, self.scores):
                w.writerow([int(u), int(i), self.method, repr(float(s))])

    def write_curve_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ratings_bin", "mean_score", "count"])
            for row in self.curve:
                w.writerow([row["ratings_bin"], repr(row["mean_score"]), row["count"]])

    def summary(self):
        return {"method": self.method, "pairs": int(len(self.scores)),
                "users": int(len(self.users)), "ratios": self.ratios}


def _ratio(a, b, label):
    if not len(a) or not len(b):
        return {"value": None, "reason": f"empty cohort ({label})"}
    den = float(np.mean(b))
    if den == 0:
        return {"value": None, "reason": f"zero mean uncertainty in reference cohort ({label})"}
    return {"value": float(np.mean(a)) / den, "n_numerator": int(len(a)), "n_denominator": int(len(b))}


def binned_curve(user_mean, user_count, edges=DEFAULT_BIN_EDGES):
    """Mean per-user score grouped by training-rating count bins ``[lo, hi)``."""
    edges = list(edges)
    rows = []
    for lo, hi in zip(edges, edges[1:] + [math.inf]):
        sel = (user_count >= lo) & (user_count < hi)
        if not sel.any():
            continue
        label = f"{lo}-{hi - 1}" if hi != math.inf else f"{lo}+"
        rows.append({"ratings_bin": label, "mean_score": float(user_mean[sel].mean()),
                     "count": int(sel.sum())})
    return rows


def user_uncertainty_profile(model, split: SplitPair, method="reparam", params=None,
                             sparse_threshold=22, inconsistency_std=1.3, num_negatives=0,
                             seed=0, bin_edges=DEFAULT_BIN_EDGES):
    """Score every evaluation pair and summarise per user and per cohort.

    Evaluation pairs are each user's held-out item plus ``num_negatives``
    sampled negatives. ``reparam`` scores a pair by the user-side embedding
    uncertainty; ``ensemble`` by the spread of member predictions (requires a
    :class:`SuperModel`). Rating counts and spreads come from the train split.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    if method == "ensemble" and not isinstance(model, SuperModel):
        raise ValueError("the ensemble method needs a SuperModel")
    train = split.train
    users, items = [], []
    for (u, i) in split.test:
        users.append(u)
        items.append(i)
        if num_negatives:
            neg = sample_negatives(train, int(u), num_negatives, seed, exclude=[i])
            users.extend([u] * len(neg))
            items.extend(neg)
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if method == "reparam":
        uu, inv = np.unique(users, return_inverse=True)
        scores = user_scores(model, uu, params)[inv]
    else:
        scores = ensemble_uncertainty(model.member_predictions(users, items))

    uniq, inv = np.unique(users, return_inverse=True)
    user_mean = np.bincount(inv, weights=scores) / np.bincount(inv)
    counts = train.user_counts()
    sums = np.bincount(train.users, weights=train.ratings, minlength=train.num_users)
    sq = np.bincount(train.users, weights=train.ratings**2, minlength=train.num_users)
    with np.errstate(invalid="ignore", divide="ignore"):
        mu = sums / counts
        std = np.sqrt(np.maximum(sq / counts - mu**2, 0))
    user_count = counts[uniq]
    user_std = np.nan_to_num(std[uniq])

    sparse = user_count < sparse_threshold
    inconsistent = user_std > inconsistency_std
    ratios = {
        "sparse_vs_dense": _ratio(user_mean[sparse], user_mean[~sparse], "sparse vs dense"),
        "inconsistent_vs_consistent": _ratio(user_mean[inconsistent], user_mean[~inconsistent],
                                             "inconsistent vs consistent"),
    }
    return UncertaintyReport(
        method, np.stack([users, items], axis=1), scores, uniq, user_mean, user_count, user_std,
        ratios, binned_curve(user_mean, user_count, bin_edges),
    )


def prune_model(model, fraction=0.2):
    """Copy of ``model`` with both towers' Bayesian layers SNR-pruned.

    Returns ``(pruned_model, masks)``; ``masks`` lists one ``(user, item)``
    mask pair per learner.
    """
    masks = []
    pruned = []
    for m in _learners(model):
        clone = WeakLearner.from_state(m.state(), m.metadata())
        pair = []
        for tower in (clone.user_tower, clone.item_tower):
            layer, mask = snr_prune(tower.bayes, fraction)
            tower.bayes.load_parameters(layer.params)
            pair.append(mask)
        masks.append(tuple(pair))
        pruned.append(clone)
    if isinstance(model, SuperModel):
        return SuperModel(pruned, model.meta, model.config, model.scale), masks
    return pruned[0], masks[0]


__all__ = [
    "ActivationStats",
    "UncertaintyReport",
    "UncertaintyScoreParams",
    "activation_stats",
    "binned_curve",
    "ensemble_uncertainty",
    "item_scores",
    "prune_model",
    "uncertainty_score",
    "user_scores",
    "user_uncertainty_profile",
]

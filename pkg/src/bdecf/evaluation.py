"""Leave-one-out ranking evaluation with sampled negatives."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .data import SplitPair, sample_negatives, subset

log = logging.getLogger(__name__)

METRIC_NAMES = ("HR@1", "HR@5", "HR@10", "NDCG@5", "NDCG@10", "MRR@5", "MRR@10")
SWEEP_METRICS = ("HR@1", "HR@10", "NDCG@10", "MRR@10")
VARIANTS = ("full", "average_combine", "single_learner", "cosine_score", "no_attention", "concat")


class EvaluationError(RuntimeError):
    """The scorer failed or returned a non-finite score."""


def metric_at_k(rank, k):
    """``(hr, ndcg, mrr)`` for a single relevant item at 1-based ``rank``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if rank is None or rank > k:
        return 0.0, 0.0, 0.0
    return 1.0, 1.0 / math.log2(rank + 1), 1.0 / rank


def metrics_from_ranks(ranks, cutoffs=(1, 5, 10)):
    """Mean HR/NDCG/MRR at every cutoff; NDCG@1 and MRR@1 equal HR@1 and are omitted."""
    ranks = np.asarray(ranks, dtype=np.float64)
    out = {}
    for k in cutoffs:
        hit = ranks <= k
        out[f"HR@{k}"] = float(hit.mean()) if len(ranks) else 0.0
        if k > 1:
            out[f"NDCG@{k}"] = float(np.where(hit, 1.0 / np.log2(ranks + 1), 0).mean()) if len(ranks) else 0.0
            out[f"MRR@{k}"] = float(np.where(hit, 1.0 / ranks, 0).mean()) if len(ranks) else 0.0
    return {name: out[name] for name in METRIC_NAMES if name in out} | {
        k: v for k, v in out.items() if k not in METRIC_NAMES
    }


@dataclass
class MetricsReport:
    metrics: dict
    users: np.ndarray
    items: np.ndarray
    ranks: np.ndarray
    num_candidates: np.ndarray
    negatives_seed: int = 0
    config: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.metrics[name]

    def check(self):
        m = self.metrics
        assert m["HR@1"] <= m["HR@5"] <= m["HR@10"]
        for k in (5, 10):
            assert m[f"MRR@{k}"] <= m[f"NDCG@{k}"] + 1e-12 <= m[f"HR@{k}"] + 2e-12

    def to_dict(self):
        return {
            "metrics": self.metrics,
            "negatives_seed": self.negatives_seed,
            "config": self.config,
            "per_user": {
                "user": self.users.tolist(),
                "item": self.items.tolist(),
                "rank": self.ranks.tolist(),
                "num_candidates": self.num_candidates.tolist(),
            },
        }

    @classmethod
    def from_dict(cls, d):
        pu = d["per_user"]
        return cls(d["metrics"], np.asarray(pu["user"]), np.asarray(pu["item"]),
                   np.asarray(pu["rank"]), np.asarray(pu["num_candidates"]),
                   d.get("negatives_seed", 0), d.get("config", {}))

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def read_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def write_csv(rows, path, columns=None):
    """Flat csv, one row per configuration (dicts of scalars)."""
    rows = list(rows)
    columns = columns or list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_csv(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                try:
                    parsed[k] = float(v)
                except ValueError:
                    parsed[k] = v
            out.append(parsed)
    return out


def candidate_lists(split: SplitPair, num_negatives=100, seed=0, exclude_from=None):
    """``(users, ids)`` where ``ids[u, 0]`` is the held-out item and the rest negatives.

    Short rows are padded with ``-1``. ``exclude_from`` is the dataset whose
    history defines non-interacted items (defaults to the train split).
    """
    history = exclude_from if exclude_from is not None else split.train
    users = split.test[:, 0]
    ids = np.full((len(users), 1 + num_negatives), -1, dtype=np.int64)
    ids[:, 0] = split.test[:, 1]
    for row, (u, i) in enumerate(split.test):
        neg = sample_negatives(history, int(u), num_negatives, seed, exclude=[i])
        ids[row, 1:1 + len(neg)] = neg
    return users.astype(np.int64), ids


def evaluate(scorer, split: SplitPair, cutoffs=(1, 5, 10), negatives_seed=0,
             num_negatives=100, tie_break="id", exclude_from=None, config=None,
             candidates=None) -> MetricsReport:
    """Rank each held-out item against sampled negatives and average the metrics.

    ``scorer(users, items) -> scores`` is called once over all candidate
    pairs. Score ties go to the smaller item id (``tie_break="id"``) or a
    seeded random order (``"random"``).
    """
    if candidates is None:
        candidates = candidate_lists(split, num_negatives, negatives_seed, exclude_from)
    users, ids = candidates
    valid = ids >= 0
    flat_u = np.repeat(users, valid.sum(axis=1))
    flat_i = ids[valid]
    try:
        flat_s = np.asarray(scorer(flat_u, flat_i), dtype=np.float64)
    except Exception as exc:
        raise EvaluationError(f"scorer failed: {exc}") from exc
    if flat_s.shape != flat_i.shape:
        raise EvaluationError(f"scorer returned shape {flat_s.shape}, expected {flat_i.shape}")
    bad = ~np.isfinite(flat_s)
    if bad.any():
        j = int(np.nonzero(bad)[0][0])
        raise EvaluationError(f"non-finite score for pair (user={flat_u[j]}, item={flat_i[j]})")
    scores = np.full(ids.shape, -np.inf)
    scores[valid] = flat_s
    order_ids = ids
    if tie_break == "random":
        rng = np.random.default_rng([int(negatives_seed), 1])
        order_ids = np.argsort(rng.random(ids.shape), axis=1).astype(np.int64)
    elif tie_break != "id":
        raise ValueError("tie_break must be 'id' or 'random'")
    # padded slots score -inf and never outrank a finite target
    ranks = kernels.target_ranks(np.ascontiguousarray(scores), np.ascontiguousarray(order_ids))
    report = MetricsReport(
        metrics_from_ranks(ranks, cutoffs), users.copy(), ids[:, 0].copy(), ranks,
        valid.sum(axis=1), int(negatives_seed), dict(config or {}),
    )
    return report


def model_scorer(model, samples=0, seed=0, mode=None):
    """Adapter turning a WeakLearner or SuperModel into a ``scorer``."""
    from .ensemble import SuperModel

    if isinstance(model, SuperModel):
        return lambda u, i: model.predict(u, i, mode=mode, samples=samples, seed=seed)
    return lambda u, i: model.predict(u, i, samples=samples, seed=seed)


def sparsity_sweep(split: SplitPair, train_fn, fractions=(0.2, 0.4, 0.6, 0.8, 1.0), seed=0,
                   negatives_seed=0, num_negatives=100, samples=0):
    """Retrain on train subsets and evaluate against the unchanged test split.

    ``train_fn(dataset) -> model``. Negatives are drawn against the full train
    history so every fraction ranks the same candidate lists.
    """
    candidates = candidate_lists(split, num_negatives, negatives_seed)
    rows = []
    for frac in fractions:
        part = subset(split.train, frac, seed)
        model = train_fn(part)
        report = evaluate(model_scorer(model, samples, negatives_seed), split,
                          negatives_seed=negatives_seed, candidates=candidates,
                          config={"fraction": frac, "train_size": len(part)})
        row = {"fraction": frac, "train_size": len(part)}
        row.update({k: report.metrics[k] for k in SWEEP_METRICS})
        rows.append((row, report))
        log.info("sweep fraction %.2f: HR@10 %.4f", frac, report.metrics["HR@10"])
    return rows


def variant_config(variant, ens_config):
    """Ensemble config realising an ablation ``variant``."""
    from dataclasses import replace

    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    base = ens_config.base
    if variant == "cosine_score":
        base = base.with_(matching="cosine")
    elif variant == "no_attention":
        base = base.with_(matching="mlp")
    elif variant == "concat":
        base = base.with_(matching="concat")
    return replace(ens_config, base=base)


def ablation_run(variant, split: SplitPair, ens_config, negatives_seed=0, num_negatives=100,
                 samples=0, cache=None):
    """Train (or reuse from ``cache``) and evaluate one ablation variant.

    ``full``, ``average_combine`` and ``single_learner`` share one trained
    ensemble; ``single_learner`` scores member 0 alone.
    """
    from .ensemble import train_supermodel

    cache = {} if cache is None else cache
    cfg = variant_config(variant, ens_config)
    key = "base" if variant in ("full", "average_combine", "single_learner") else variant
    if key not in cache:
        cache[key], _ = train_supermodel(split.train, cfg)
    model = cache[key]
    if variant == "single_learner":
        scorer = model_scorer(model.learners[0], samples, negatives_seed)
    else:
        mode = "average" if variant == "average_combine" else "mlp"
        scorer = model_scorer(model, samples, negatives_seed, mode)
    return evaluate(scorer, split, negatives_seed=negatives_seed, num_negatives=num_negatives,
                    config={"variant": variant})

"""SuperModel: K diverse weak learners stacked under a small MLP combiner."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bayes import PRIOR_FAMILIES, PriorSpec
from .data import RatingDataset, bootstrap
from .model import LearnerConfig, TrainTrace, WeakLearner, train_weak_learner
from .nn import Adam, load_container, mlp, save_container

log = logging.getLogger(__name__)

COMBINE_MODES = ("mlp", "average")
DEFAULT_DEPTHS = ((256,), (256, 128), (256, 128, 64))


@dataclass(frozen=True)
class EnsembleConfig:
    K: int = 10
    bootstrap_fraction: float = 0.8
    priors: tuple[PriorSpec, ...] = tuple(PriorSpec(f) for f in PRIOR_FAMILIES)
    depth_cycle: tuple[tuple[int, ...], ...] = DEFAULT_DEPTHS
    seeds: tuple[int, ...] = ()
    bootstrap_seeds: tuple[int, ...] = ()
    meta_dims: tuple[int, ...] = (32, 32)
    combine_mode: str = "mlp"
    meta_epochs: int = 20
    meta_learning_rate: float = 1e-3
    meta_batch_size: int = 256
    meta_samples: int = 0
    meta_seed: int = 0
    base: LearnerConfig = field(default_factory=LearnerConfig)

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if len(self.seeds) != self.K or len(self.bootstrap_seeds) != self.K:
            raise ValueError("seeds and bootstrap_seeds need exactly K entries")
        if len(set(self.seeds)) != self.K:
            raise ValueError("learner seeds must be pairwise distinct")
        if not self.priors or not self.depth_cycle:
            raise ValueError("priors and depth_cycle must be non-empty")
        if self.combine_mode not in COMBINE_MODES:
            raise ValueError(f"combine_mode must be one of {COMBINE_MODES}")
        if not self.bootstrap_fraction > 0:
            raise ValueError("bootstrap_fraction must be positive")

    def learner_config(self, k):
        return self.base.with_(
            prior=self.priors[k % len(self.priors)],
            hidden_dims=tuple(self.depth_cycle[k % len(self.depth_cycle)]),
            seed=int(self.seeds[k]),
        )

    def learner_configs(self):
        return [self.learner_config(k) for k in range(self.K)]

    def to_dict(self):
        d = asdict(self)
        d["priors"] = [p.to_dict() for p in self.priors]
        d["depth_cycle"] = [list(x) for x in self.depth_cycle]
        d["seeds"] = list(self.seeds)
        d["bootstrap_seeds"] = list(self.bootstrap_seeds)
        d["meta_dims"] = list(self.meta_dims)
        d["base"] = self.base.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["priors"] = tuple(PriorSpec(**p) for p in d["priors"])
        d["depth_cycle"] = tuple(tuple(x) for x in d["depth_cycle"])
        d["seeds"] = tuple(d["seeds"])
        d["bootstrap_seeds"] = tuple(d["bootstrap_seeds"])
        d["meta_dims"] = tuple(d["meta_dims"])
        d["base"] = LearnerConfig.from_dict(d["base"])
        return cls(**d)


def build_ensemble_config(K=10, base: LearnerConfig | None = None, seed=0, **kw):
    """Cycle priors and depths over K learners with seeds fanned out from ``seed``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    base = base or LearnerConfig()
    state = np.random.SeedSequence(seed).generate_state(2 * K + 1, dtype=np.uint32)
    seeds = [int(s) for s in state[:K]]
    # generate_state collisions are astronomically unlikely but seeds must differ
    while len(set(seeds)) < K:
        seeds = [s + i for i, s in enumerate(seeds)]
    kw.setdefault("meta_seed", int(state[2 * K]))
    return EnsembleConfig(
        K=K, seeds=tuple(seeds), bootstrap_seeds=tuple(int(s) for s in state[K:2 * K]),
        base=base, **kw,
    )


class SuperModel:
    def __init__(self, learners, meta, config: EnsembleConfig, scale):
        self.learners = list(learners)
        self.meta = meta
        self.config = config
        self.scale = tuple(scale)
        if meta is not None and meta.layers[0].in_dim != len(self.learners):
            raise ValueError("meta input width must equal the number of learners")

    @property
    def K(self):
        return len(self.learners)

    def member_predictions(self, users, items, samples=0, seed=0):
        """``(n, K)`` matrix of member ratings on the dataset scale."""
        return np.stack(
            [m.predict(users, items, samples, seed) for m in self.learners], axis=1
        )

    def combine(self, Z, mode=None):
        mode = mode or self.config.combine_mode
        if mode == "average":
            return Z.mean(axis=1)
        if mode != "mlp":
            raise ValueError(f"unknown combine mode {mode!r}")
        if self.meta is None:
            raise ValueError("this SuperModel has no trained meta combiner")
        y = self.meta.forward(np.asarray(Z, dtype=np.float64) / self.scale[1])[:, 0]
        return np.clip(y * self.scale[1], self.scale[0], self.scale[1])

    def predict(self, users, items, mode=None, samples=0, seed=0, return_members=False):
        Z = self.member_predictions(users, items, samples, seed)
        r = self.combine(Z, mode)
        return (r, Z) if return_members else r

    # ------------------------------------------------------------ persistence

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for k, m in enumerate(self.learners):
            name = f"learner_{k:02d}.ckpt"
            m.save(directory / name, {"member": k})
            files.append(name)
        meta_file = None
        if self.meta is not None:
            meta_file = "meta.ckpt"
            save_container(directory / meta_file, dict(self.meta.named_parameters()),
                           {"kind": "meta", "dims": meta_dims_of(self.meta)})
        manifest = {
            "kind": "supermodel",
            "K": self.K,
            "scale": list(self.scale),
            "learners": files,
            "meta": meta_file,
            "config": self.config.to_dict(),
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        if manifest.get("kind") != "supermodel":
            raise ValueError(f"{directory} does not hold a SuperModel")
        learners = [WeakLearner.load(directory / f) for f in manifest["learners"]]
        meta = None
        if manifest["meta"]:
            arrays, info = load_container(directory / manifest["meta"])
            meta = mlp(info["dims"], np.random.default_rng(0), out_activation="sigmoid")
            meta.load_parameters(arrays)
        return cls(learners, meta, EnsembleConfig.from_dict(manifest["config"]), manifest["scale"])


def meta_dims_of(meta):
    return [meta.layers[0].in_dim] + [layer.out_dim for layer in meta.layers]


def fit_meta(Z, targets, scale, dims=(32, 32), epochs=20, learning_rate=1e-3,
             batch_size=256, seed=0):
    """Train the combiner on member ratings ``Z`` ``(n, K)`` against ``targets``.

    Inputs and targets are normalised by the top of the rating scale; the
    loss is mean squared error. Returns ``(meta, per-epoch mse)``.
    """
    Z = np.asarray(Z, dtype=np.float64) / scale[1]
    y = np.asarray(targets, dtype=np.float64) / scale[1]
    rng = np.random.default_rng(seed)
    meta = mlp([Z.shape[1], *dims, 1], rng, out_activation="sigmoid")
    opt = Adam(learning_rate)
    params = meta.parameters()
    n = len(y)
    trace = []
    for _ in range(epochs):
        order = rng.permutation(n)
        sse = 0.0
        for b in range(math.ceil(n / batch_size)):
            idx = order[b * batch_size:(b + 1) * batch_size]
            meta.zero_grad()
            resid = meta.forward(Z[idx])[:, 0] - y[idx]
            sse += float(resid @ resid)
            meta.backward((2.0 / len(idx)) * resid[:, None])
            opt.step(params, meta.gradients())
        trace.append(sse / n)
    return meta, trace


def meta_training_pairs(dataset: RatingDataset, negatives_per_positive=0, seed=0):
    """``(users, items, targets)`` the combiner is fitted on.

    Observed ratings, plus ``negatives_per_positive`` random unrated items
    per rating with target 0 when the members were trained that way too.
    """
    users, items, r = dataset.users, dataset.items, dataset.ratings
    k = negatives_per_positive
    if not k:
        return users, items, r
    rng = np.random.default_rng([int(seed), 1])
    neg_u = np.repeat(users, k)
    neg_i = rng.integers(0, dataset.num_items, size=len(neg_u))
    seen = np.asarray(dataset.rating_matrix()[neg_u, neg_i]).ravel() != 0
    neg_u, neg_i = neg_u[~seen], neg_i[~seen]
    return (np.concatenate([users, neg_u]), np.concatenate([items, neg_i]),
            np.concatenate([r, np.zeros(len(neg_u))]))


def _resumable(path, boot, learner_config):
    """Learner saved at ``path`` if it was trained on ``boot`` with ``learner_config``."""
    if not path.is_file():
        return None
    try:
        learner = WeakLearner.load(path)
    except (OSError, ValueError):
        return None
    same = (learner.dataset_fingerprint == boot.fingerprint()
            and learner.config.to_dict() == learner_config.to_dict())
    return learner if same else None


def train_supermodel(dataset: RatingDataset, config: EnsembleConfig, progress=None,
                     resume_dir=None):
    """Bootstrap, train each learner independently, then fit the combiner.

    Member inputs to the combiner are in-sample predictions over the full
    ``dataset`` (posterior mean unless ``config.meta_samples > 0``), plus
    sampled negatives when the learners train with them.
    Returns ``(model, info)`` where ``info`` holds loss traces.

    With ``resume_dir`` each learner is saved there as soon as it is trained,
    and matching learners already present are loaded instead of retrained
    (their trace is then empty).
    """
    if not len(dataset):
        raise ValueError("cannot train on an empty dataset")
    if resume_dir is not None:
        resume_dir = Path(resume_dir)
        resume_dir.mkdir(parents=True, exist_ok=True)
    learners, traces = [], []
    for k in range(config.K):
        boot = bootstrap(dataset, config.bootstrap_fraction, config.bootstrap_seeds[k])
        path = None if resume_dir is None else resume_dir / f"learner_{k:02d}.ckpt"
        learner = None if path is None else _resumable(path, boot, config.learner_config(k))
        if learner is not None:
            trace = TrainTrace()
            log.info("learner %d/%d resumed from %s", k + 1, config.K, path)
        else:
            learner, trace = train_weak_learner(boot, config.learner_config(k))
            if path is not None:
                learner.save(path, {"member": k})
            log.info("learner %d/%d trained (final loss %.4f)", k + 1, config.K,
                     trace.loss[-1] if trace.loss else float("nan"))
        learners.append(learner)
        traces.append(trace)
        if progress:
            progress(k, trace)
    model = SuperModel(learners, None, config, dataset.scale)
    info = {"learner_traces": [t.to_dict() for t in traces], "meta_trace": []}
    if config.combine_mode == "mlp" or config.meta_epochs > 0:
        users, items, targets = meta_training_pairs(
            dataset, config.base.negatives_per_positive, config.meta_seed)
        Z = model.member_predictions(users, items, config.meta_samples, config.meta_seed)
        model.meta, info["meta_trace"] = fit_meta(
            Z, targets, dataset.scale, config.meta_dims, config.meta_epochs,
            config.meta_learning_rate, config.meta_batch_size, config.meta_seed,
        )
        info["meta_train_size"] = len(Z)
    return model, info


def supermodel_predict(model: SuperModel, user_id, item_id, mode=None, samples=0, seed=0):
    """Combined rating for one pair plus the K member ratings."""
    r, Z = model.predict([user_id], [item_id], mode, samples, seed, return_members=True)
    return float(r[0]), Z[0]

"""Run configuration: a nested tree of dataclasses read from YAML.

Every field has a default, so an empty file is a valid config. Unknown keys
raise :class:`ConfigError`. ``seed`` is the single root seed; learner,
bootstrap and meta seeds are fanned out from it, and negatives use
``eval.negatives_seed`` (defaulting to the root seed).

Example::

    dataset:
      path: data/ml-100k/u.data
      format: movielens-100k
    ensemble:
      K: 10
    training:
      epochs: 30
    seed: 0
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .bayes import PriorSpec
from .ensemble import EnsembleConfig, build_ensemble_config
from .model import LearnerConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration: unknown key, bad type or out-of-range value."""


@dataclass
class DatasetSpec:
    path: str | None = None
    format: str = "movielens-100k"
    scale: list | None = None  # [lo, hi]; inferred from the file when unset
    min_item_raters: int = 5
    min_user_ratings: int = 20
    preprocess: bool = True


@dataclass
class ModelSpec:
    hidden_dims: list = field(default_factory=lambda: [256, 128])
    embedding_dim: int = 64
    num_tokens: int = 8
    num_heads: int = 4
    dropout: float = 0.1
    mlp_dims: list = field(default_factory=lambda: [32])
    matching: str = "attention"
    mask_target: bool = True
    dtype: str = "float32"


@dataclass
class BayesSpec:
    prior: str = "gsm"
    pi: float = 0.5
    sigma1: float = 1.0
    sigma2: float = 0.0024787521766663585  # exp(-6)
    loc: float = 0.0
    b: float = 1.0
    sigma: float = 1.0
    rho_init: float = -5.0
    train_samples: int = 1
    predict_samples: int = 0  # 0: posterior mean weights
    kl_weight: float | None = None  # None: 1 / minibatches per epoch
    likelihood_std: float = 0.1


@dataclass
class EnsembleSpec:
    enabled: bool = True
    K: int = 10
    bootstrap_fraction: float = 0.8
    prior_cycle: list = field(default_factory=lambda: ["gsm", "laplace", "isotropic"])
    depth_cycle: list = field(default_factory=lambda: [[256], [256, 128], [256, 128, 64]])
    meta_dims: list = field(default_factory=lambda: [32, 32])
    combine_mode: str = "mlp"
    meta_epochs: int = 20
    meta_learning_rate: float = 1e-3
    meta_batch_size: int = 256


@dataclass
class TrainingSpec:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 30
    negatives_per_positive: int = 0


@dataclass
class EvalSpec:
    cutoffs: list = field(default_factory=lambda: [1, 5, 10])
    num_negatives: int = 100
    negatives_seed: int | None = None
    tie_break: str = "id"
    sweep_fractions: list = field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8, 1.0])
    variants: list = field(default_factory=lambda: [
        "full", "average_combine", "single_learner", "cosine_score", "no_attention", "concat"])


@dataclass
class UncertaintySpec:
    alpha: float = 10.0
    beta: float = 80.0
    sparse_threshold: int = 22
    inconsistency_std: float = 1.3
    num_negatives: int = 0
    prune_fraction: float = 0.2


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    output_dir: str | None = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    bayes: BayesSpec = field(default_factory=BayesSpec)
    ensemble: EnsembleSpec = field(default_factory=EnsembleSpec)
    training: TrainingSpec = field(default_factory=TrainingSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    uncertainty: UncertaintySpec = field(default_factory=UncertaintySpec)

    # ---------------------------------------------------------- conversion

    @property
    def negatives_seed(self):
        s = self.eval.negatives_seed
        return self.seed if s is None else s

    def prior(self, family=None):
        b = self.bayes
        return PriorSpec(family or b.prior, b.pi, b.sigma1, b.sigma2, b.loc, b.b, b.sigma)

    def learner_config(self) -> LearnerConfig:
        m, b, t = self.model, self.bayes, self.training
        return LearnerConfig(
            hidden_dims=tuple(m.hidden_dims), embedding_dim=m.embedding_dim,
            num_tokens=m.num_tokens, num_heads=m.num_heads, dropout=m.dropout,
            mlp_dims=tuple(m.mlp_dims), matching=m.matching, prior=self.prior(),
            rho_init=b.rho_init, optimizer=t.optimizer, learning_rate=t.learning_rate,
            batch_size=t.batch_size, epochs=t.epochs, seed=self.seed,
            likelihood_std=b.likelihood_std, kl_weight=b.kl_weight,
            train_samples=b.train_samples, negatives_per_positive=t.negatives_per_positive,
            mask_target=m.mask_target, dtype=m.dtype,
        )

    def ensemble_config(self) -> EnsembleConfig:
        e = self.ensemble
        return build_ensemble_config(
            K=e.K, base=self.learner_config(), seed=self.seed,
            bootstrap_fraction=e.bootstrap_fraction,
            priors=tuple(self.prior(f) for f in e.prior_cycle),
            depth_cycle=tuple(tuple(d) for d in e.depth_cycle),
            meta_dims=tuple(e.meta_dims), combine_mode=e.combine_mode,
            meta_epochs=e.meta_epochs, meta_learning_rate=e.meta_learning_rate,
            meta_batch_size=e.meta_batch_size, meta_samples=self.bayes.predict_samples,
        )

    def validate(self):
        """Build the derived configs once so range errors surface as ConfigError."""
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if self.eval.tie_break not in ("id", "random"):
            raise ConfigError("eval.tie_break must be 'id' or 'random'")
        if any(k < 1 for k in self.eval.cutoffs):
            raise ConfigError("eval.cutoffs must be >= 1")
        if self.eval.num_negatives < 0:
            raise ConfigError("eval.num_negatives must be >= 0")
        if not all(0 < f <= 1 for f in self.eval.sweep_fractions):
            raise ConfigError("eval.sweep_fractions must lie in (0, 1]")
        if self.dataset.scale is not None and len(self.dataset.scale) != 2:
            raise ConfigError("dataset.scale must be [lo, hi]")
        try:
            self.learner_config()
            if self.ensemble.enabled:
                self.ensemble_config()
            self.prior()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _coerce(value, tp, where):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return _build(tp, value, where + ".")
    if tp is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, str)) or (
                isinstance(value, str) and not value.lstrip("-").isdigit()):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return int(value)
    if tp is float:
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected a number, got {value!r}") from None
    if tp is str:
        if not isinstance(value, (str, int, float)):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return str(value)
    if tp is list or origin is list:
        if isinstance(value, str):
            value = yaml.safe_load(value)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return list(value)
    return value


def _build(cls, data, where=""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(where + k for k in unknown)}")
    return cls(**{k: _coerce(v, hints[k], where + k) for k, v in data.items()})


def from_dict(data) -> RunConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return _build(RunConfig, data).validate()


def load_config(path=None, overrides=()) -> RunConfig:
    """Read YAML at ``path`` (or defaults) and apply ``("section.key", value)`` overrides."""
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
    for key, raw in overrides:
        apply_override(data, key, raw)
    return from_dict(data)


def apply_override(data, key, raw):
    """Set dotted ``key`` in nested dict ``data``; ``raw`` is parsed as a YAML scalar."""
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key}: {p} is not a section")
    value = yaml.safe_load(raw) if isinstance(raw, str) else raw
    node[parts[-1]] = value
    return data

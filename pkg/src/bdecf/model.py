"""The weak learner: two Bayesian-last-layer towers and an attention matcher.

A user is embedded from its row of the (normalised) rating matrix and an
item from its column. The element-wise product of the two embeddings is
cut into ``num_tokens`` tokens, mixed by multi-head self-attention across
tokens, flattened and mapped to a rating by an MLP with a sigmoid head.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import kernels
from .bayes import BayesianLinear, PriorSpec
from .data import RatingDataset
from .nn import (
    Dense,
    Module,
    NonFiniteError,
    Sequential,
    SparseInputDense,
    SparseRows,
    load_container,
    make_optimizer,
    mlp,
    save_container,
)

log = logging.getLogger(__name__)

MATCHING = ("attention", "mlp", "concat", "cosine")
_NORM_EPS = 1e-12
PREDICT_CHUNK = 8192  # pairs per inference batch


class TrainingDivergence(NonFiniteError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class LearnerConfig:
    """Architecture and training hyperparameters of one weak learner."""

    hidden_dims: tuple[int, ...] = (256, 128)
    embedding_dim: int = 64
    num_tokens: int = 8
    num_heads: int = 4
    dropout: float = 0.1
    mlp_dims: tuple[int, ...] = (32,)
    matching: str = "attention"
    prior: PriorSpec = field(default_factory=PriorSpec)
    rho_init: float = -5.0
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 30
    seed: int = 0
    likelihood_std: float = 0.1
    kl_weight: float | None = None  # None: 1 / minibatches per epoch
    train_samples: int = 1
    negatives_per_positive: int = 0
    mask_target: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "mlp_dims", tuple(int(h) for h in self.mlp_dims))
        if isinstance(self.prior, dict):
            object.__setattr__(self, "prior", PriorSpec(**self.prior))
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        if self.matching not in MATCHING:
            raise ValueError(f"matching must be one of {MATCHING}")
        if self.matching == "attention":
            if self.embedding_dim % self.num_tokens:
                raise ValueError("num_tokens must divide embedding_dim")
            if (self.embedding_dim // self.num_tokens) % self.num_heads:
                raise ValueError("num_heads must divide the token width")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.train_samples < 1:
            raise ValueError("batch_size and train_samples must be >= 1, epochs >= 0")
        if self.likelihood_std <= 0:
            raise ValueError("likelihood_std must be positive")
        if self.kl_weight is not None and not 0 <= self.kl_weight <= 1:
            raise ValueError("kl_weight must lie in [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_dict(self):
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        d["mlp_dims"] = list(self.mlp_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "prior" in d and isinstance(d["prior"], dict):
            d["prior"] = PriorSpec(**d["prior"])
        return cls(**d)

    def with_(self, **kw):
        return replace(self, **kw)


class Tower(Module):
    """ReLU hidden stack followed by a Bayesian affine layer."""

    def __init__(self, input_dim, hidden_dims, embedding_dim, prior, rng, rho_init=-5.0,
                 dtype=np.float64):
        super().__init__()
        self.input_dim = input_dim
        layers = []
        width = input_dim
        for i, h in enumerate(hidden_dims):
            cls = SparseInputDense if i == 0 else Dense
            layers.append(cls(width, h, "relu", rng=rng, dtype=dtype))
            width = h
        self.hidden = Sequential(layers)
        self.bayes = BayesianLinear(width, embedding_dim, prior, rng=rng, rho_init=rho_init, dtype=dtype)

    def children(self):
        return {"hidden": self.hidden, "bayes": self.bayes}

    def features(self, x):
        """Deterministic hidden state fed to the Bayesian layer."""
        if not self.hidden.layers and isinstance(x, SparseRows):
            x = x.dense().astype(self.bayes.params["W_mu"].dtype)
        return self.hidden.forward(x)

    def forward(self, x, deterministic=False):
        return self.bayes.forward(self.features(x), deterministic)

    def backward(self, dout):
        self.hidden.backward(self.bayes.backward(dout))


def tower_forward(tower: Tower, rating_vector, deterministic=True, eps=None):
    """Embed one dense rating vector (entries already normalised to [0, 1])."""
    x = np.asarray(rating_vector, dtype=tower.bayes.params["W_mu"].dtype)
    if x.shape != (tower.input_dim,):
        raise ValueError(f"expected a vector of length {tower.input_dim}, got {x.shape}")
    if eps is not None:
        tower.bayes.set_noise(*eps)
    return tower.forward(x[None, :], deterministic=deterministic)[0]


class TokenAttention(Module):
    """Multi-head self-attention across the tokens of one interaction vector.

    No output projection: head outputs are concatenated back to the token width.
    """

    def __init__(self, dim, num_tokens, num_heads, dropout=0.0, rng=None, dtype=np.float64):
        super().__init__()
        self.dim, self.num_tokens, self.num_heads = dim, num_tokens, num_heads
        self.token_dim = dim // num_tokens
        self.head_dim = self.token_dim // num_heads
        self.dropout = dropout
        rng = np.random.default_rng(rng)
        D = self.token_dim
        limit = math.sqrt(6.0 / (2 * D))
        for name in ("Wq", "Wk", "Wv"):
            self.params[name] = rng.uniform(-limit, limit, size=(D, D)).astype(dtype)
        self.zero_grad()

    def _split(self, a):
        B, T = a.shape[0], self.num_tokens
        return np.ascontiguousarray(a.reshape(B, T, self.num_heads, self.head_dim).transpose(0, 2, 1, 3))

    def _merge(self, a):
        B = a.shape[0]
        return np.ascontiguousarray(a.transpose(0, 2, 1, 3)).reshape(B, self.num_tokens, self.token_dim)

    def forward_tokens(self, X, rng=None):
        """``X`` is ``(batch, tokens, token_dim)``; returns the same shape."""
        Q = self._split(X @ self.params["Wq"])
        K = self._split(X @ self.params["Wk"])
        V = self._split(X @ self.params["Wv"])
        mask = None
        if rng is not None and self.dropout > 0:
            keep = 1.0 - self.dropout
            shape = (X.shape[0], self.num_heads, self.num_tokens, self.num_tokens)
            mask = ((rng.random(shape) < keep) / keep).astype(X.dtype)
        out, probs = kernels.attention_forward(Q, K, V, mask)
        self._cache = (X, Q, K, V, probs, mask)
        self.last_probs = probs
        return self._merge(out)

    def forward(self, x, rng=None):
        B = x.shape[0]
        return self.forward_tokens(x.reshape(B, self.num_tokens, self.token_dim), rng).reshape(B, self.dim)

    def backward(self, dout):
        X, Q, K, V, probs, mask = self._cache
        B = X.shape[0]
        d = self._split(np.ascontiguousarray(dout).reshape(B, self.num_tokens, self.token_dim))
        dQ, dK, dV = kernels.attention_backward(d, probs, Q, K, V, mask)
        Xf = X.reshape(-1, self.token_dim)
        dx = np.zeros_like(X)
        for name, g in (("Wq", dQ), ("Wk", dK), ("Wv", dV)):
            gm = self._merge(g)
            self.grads[name] += Xf.T @ gm.reshape(-1, self.token_dim)
            dx += gm @ self.params[name].T
        return dx.reshape(B, self.dim)


def cosine(p, q):
    """Row-wise cosine similarity (0 for zero vectors)."""
    num = (p * q).sum(axis=-1)
    den = np.linalg.norm(p, axis=-1) * np.linalg.norm(q, axis=-1)
    return num / np.maximum(den, _NORM_EPS)


class WeakLearner(Module):
    """Towers + matching head, bound to the rating matrix it was built from."""

    def __init__(self, dataset: RatingDataset, config: LearnerConfig | None = None):
        super().__init__()
        self.config = config = config or LearnerConfig()
        self.dtype = np.dtype(config.dtype)
        self.scale = dataset.scale
        self.num_users, self.num_items = dataset.num_users, dataset.num_items
        self.inputs = (dataset.users.copy(), dataset.items.copy(), dataset.ratings.copy())
        self.dataset_fingerprint = dataset.fingerprint()
        self.user_matrix = dataset.rating_matrix(dtype=self.dtype)
        self.item_matrix = self.user_matrix.T.tocsr()
        self.item_matrix.sort_indices()
        self.item_matrix.indptr = self.item_matrix.indptr.astype(np.int64)
        self.item_matrix.indices = self.item_matrix.indices.astype(np.int64)

        ss = np.random.SeedSequence(config.seed)
        init_seq, self._train_seq = ss.spawn(2)
        rngs = [np.random.default_rng(s) for s in init_seq.spawn(4)]
        dt = self.dtype
        d = config.embedding_dim
        self.user_tower = Tower(self.num_items, config.hidden_dims, d, config.prior, rngs[0],
                                config.rho_init, dt)
        self.item_tower = Tower(self.num_users, config.hidden_dims, d, config.prior, rngs[1],
                                config.rho_init, dt)
        self.attention = None
        if config.matching == "attention":
            self.attention = TokenAttention(d, config.num_tokens, config.num_heads,
                                            config.dropout, rngs[2], dt)
        self.head = None
        if config.matching != "cosine":
            in_dim = 2 * d if config.matching == "concat" else d
            self.head = mlp([in_dim, *config.mlp_dims, 1], rngs[3], out_activation="sigmoid", dtype=dt)

    def children(self):
        c = {"user_tower": self.user_tower, "item_tower": self.item_tower}
        if self.attention is not None:
            c["attention"] = self.attention
        if self.head is not None:
            c["head"] = self.head
        return c

    @property
    def bayesian_layers(self):
        return [self.user_tower.bayes, self.item_tower.bayes]

    # ------------------------------------------------------------ forward

    def normalize(self, r):
        return np.asarray(r) / self.scale[1]

    def denormalize(self, y):
        return np.clip(np.asarray(y) * self.scale[1], self.scale[0], self.scale[1])

    def _inputs(self, users, items, mask_target):
        ex_items = items if mask_target else None
        ex_users = users if mask_target else None
        return (SparseRows(self.user_matrix, users, ex_items),
                SparseRows(self.item_matrix, items, ex_users))

    def match(self, p, q, rng=None):
        """Normalised prediction in (0, 1) from paired embeddings."""
        m = self.config.matching
        if m == "cosine":
            self._match_cache = (p, q)
            return (cosine(p, q) + 1) / 2
        if m == "concat":
            x = np.concatenate([p, q], axis=1)
        else:
            x = p * q
        self._match_cache = (p, q)
        if self.attention is not None:
            x = self.attention.forward(x, rng)
        return self.head.forward(x)[:, 0]

    def match_backward(self, dy):
        p, q = self._match_cache
        m = self.config.matching
        if m == "cosine":
            np_ = np.maximum(np.linalg.norm(p, axis=1, keepdims=True), _NORM_EPS)
            nq = np.maximum(np.linalg.norm(q, axis=1, keepdims=True), _NORM_EPS)
            c = ((p * q).sum(axis=1, keepdims=True)) / (np_ * nq)
            g = dy[:, None] / 2
            return g * (q / (np_ * nq) - c * p / np_**2), g * (p / (np_ * nq) - c * q / nq**2)
        dx = self.head.backward(dy[:, None].astype(p.dtype))
        if self.attention is not None:
            dx = self.attention.backward(dx)
        if m == "concat":
            d = p.shape[1]
            return dx[:, :d], dx[:, d:]
        return dx * q, dx * p

    def forward_pairs(self, users, items, deterministic=False, rng=None, mask_target=None):
        """Normalised predictions for a batch of pairs using the current noise."""
        if mask_target is None:
            mask_target = self.config.mask_target
        xu, xi = self._inputs(users, items, mask_target)
        p = self.user_tower.forward(xu, deterministic)
        q = self.item_tower.forward(xi, deterministic)
        return self.match(p, q, rng)

    # ------------------------------------------------------------ training

    def loss_and_grads(self, users, items, targets, kl_weight=1.0, noise_rng=None,
                       dropout_rng=None, samples=1):
        """Monte-Carlo minibatch loss and its gradients (accumulated in ``grads``).

        Returns ``(loss, nll, kl, sse)`` averaged over ``samples`` draws.
        ``noise_rng=None`` reuses the noise already set on the Bayesian layers.
        """
        self.zero_grad()
        y = np.asarray(targets, dtype=self.dtype)
        inv_var = 1.0 / self.config.likelihood_std**2
        tot = np.zeros(4)
        for _ in range(samples):
            if noise_rng is not None:
                for layer in self.bayesian_layers:
                    layer.sample(noise_rng)
            yhat = self.forward_pairs(users, items, deterministic=False, rng=dropout_rng)
            resid = yhat - y
            sse = float(np.dot(resid, resid))
            nll = 0.5 * inv_var * sse
            kl = sum(layer.kl_term() for layer in self.bayesian_layers)
            loss = kl_weight * kl + nll
            if not math.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss (nll={nll}, kl={kl})")
            dy = (inv_var / samples) * resid
            dp, dq = self.match_backward(dy)
            self.user_tower.backward(dp)
            self.item_tower.backward(dq)
            for layer in self.bayesian_layers:
                layer.kl_backward(kl_weight / samples)
            tot += (loss, nll, kl, sse)
        return tuple(tot / samples)

    def optimizer_step(self, optimizer, params=None):
        optimizer.step(params or self.parameters(), self.gradients())

    # ------------------------------------------------------------ prediction

    def _embed_all(self, tower, matrix, ids, deterministic):
        return tower.forward(SparseRows(matrix, ids), deterministic)

    def predict_normalized(self, users, items, samples=0, seed=0):
        """Normalised predictions; ``samples=0`` evaluates at the posterior mean."""
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.shape != items.shape:
            raise ValueError("users and items must have the same shape")
        if len(users) and (users.min() < 0 or users.max() >= self.num_users):
            raise KeyError("unknown user id")
        if len(items) and (items.min() < 0 or items.max() >= self.num_items):
            raise KeyError("unknown item id")
        if not len(users):
            return np.zeros(0)
        uu, u_inv = np.unique(users, return_inverse=True)
        ii, i_inv = np.unique(items, return_inverse=True)
        observed = np.zeros(len(users), dtype=bool)
        if self.config.mask_target:
            observed = np.asarray(self.user_matrix[users, items]).ravel() != 0
        rng = np.random.default_rng([int(seed), 7])
        n_draws = max(samples, 1)
        det = samples == 0
        out = np.zeros(len(users))
        for _ in range(n_draws):
            if samples:
                for layer in self.bayesian_layers:
                    layer.sample(rng)
            P_all = self._embed_all(self.user_tower, self.user_matrix, uu, det)
            Q_all = self._embed_all(self.item_tower, self.item_matrix, ii, det)
            # chunks bound the activations held by the towers and matcher
            for lo in range(0, len(users), PREDICT_CHUNK):
                sl = slice(lo, lo + PREDICT_CHUNK)
                P, Q = P_all[u_inv[sl]], Q_all[i_inv[sl]]
                obs = observed[sl]
                if obs.any():
                    ou, oi = users[sl][obs], items[sl][obs]
                    P[obs] = self.user_tower.forward(SparseRows(self.user_matrix, ou, oi), det)
                    Q[obs] = self.item_tower.forward(SparseRows(self.item_matrix, oi, ou), det)
                out[sl] += self.match(P, Q)
        self.clear_cache()
        return out / n_draws

    def predict(self, users, items, samples=0, seed=0):
        """Predicted ratings on the dataset scale."""
        return self.denormalize(self.predict_normalized(users, items, samples, seed))

    def embeddings(self, users=None, items=None, deterministic=True):
        out = []
        if users is not None:
            out.append(self._embed_all(self.user_tower, self.user_matrix,
                                       np.asarray(users, dtype=np.int64), deterministic))
        if items is not None:
            out.append(self._embed_all(self.item_tower, self.item_matrix,
                                       np.asarray(items, dtype=np.int64), deterministic))
        return out[0] if len(out) == 1 else tuple(out)

    # ------------------------------------------------------------ persistence

    def state(self):
        arrays = {f"param.{k}": v for k, v in self.named_parameters()}
        u, i, r = self.inputs
        arrays.update({"input.users": u, "input.items": i, "input.ratings": r})
        return arrays

    def metadata(self):
        return {
            "kind": "weak_learner",
            "config": self.config.to_dict(),
            "scale": list(self.scale),
            "num_users": self.num_users,
            "num_items": self.num_items,
            "dataset_fingerprint": self.dataset_fingerprint,
        }

    def save(self, path, extra_meta=None):
        meta = self.metadata()
        meta.update(extra_meta or {})
        save_container(path, self.state(), meta)

    @classmethod
    def from_state(cls, arrays, meta):
        config = LearnerConfig.from_dict(meta["config"])
        n = len(arrays["input.users"])
        ds = RatingDataset(
            arrays["input.users"].astype(np.int64), arrays["input.items"].astype(np.int64),
            arrays["input.ratings"], np.zeros(n, dtype=np.int64), np.arange(n, dtype=np.int64),
            int(meta["num_users"]), int(meta["num_items"]), tuple(meta["scale"]),
        )
        model = cls(ds, config)
        model.dataset_fingerprint = meta.get("dataset_fingerprint", model.dataset_fingerprint)
        model.load_parameters({k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
        return model

    @classmethod
    def load(cls, path):
        arrays, meta = load_container(path)
        if meta.get("kind") != "weak_learner":
            raise ValueError(f"{path} is not a weak learner checkpoint")
        return cls.from_state(arrays, meta)


def predict(model: WeakLearner, user_id, item_id, samples=1, seed=0):
    """Single-pair prediction averaged over ``samples`` posterior draws."""
    return float(model.predict([user_id], [item_id], samples, seed)[0])


@dataclass
class TrainTrace:
    loss: list = field(default_factory=list)
    nll: list = field(default_factory=list)
    kl: list = field(default_factory=list)
    mse: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _training_pairs(dataset, model, cfg, rng):
    users, items, y = dataset.users, dataset.items, model.normalize(dataset.ratings)
    k = cfg.negatives_per_positive
    if not k:
        return users, items, y
    n = len(users) * k
    neg_u = np.repeat(users, k)
    neg_i = rng.integers(0, dataset.num_items, size=n)
    seen = np.asarray(model.user_matrix[neg_u, neg_i]).ravel() != 0
    neg_u, neg_i = neg_u[~seen], neg_i[~seen]
    return (np.concatenate([users, neg_u]), np.concatenate([items, neg_i]),
            np.concatenate([y, np.zeros(len(neg_u))]))


def train_weak_learner(dataset: RatingDataset, config: LearnerConfig | None = None,
                       model: WeakLearner | None = None, progress=None):
    """Minibatch Bayes-by-Backprop training. Returns ``(model, trace)``.

    The model's input matrix is built from ``dataset``; pass ``model`` to
    continue training an existing learner.
    """
    if not len(dataset):
        raise ValueError("cannot train on an empty dataset")
    config = config or LearnerConfig()
    model = model or WeakLearner(dataset, config)
    cfg = model.config
    shuffle_seq, noise_seq, drop_seq, neg_seq = model._train_seq.spawn(4)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    noise_rng = np.random.default_rng(noise_seq)
    drop_rng = np.random.default_rng(drop_seq)
    neg_rng = np.random.default_rng(neg_seq)
    optimizer = make_optimizer(cfg.optimizer, cfg.learning_rate)
    params = model.parameters()
    trace = TrainTrace()
    for epoch in range(cfg.epochs):
        users, items, y = _training_pairs(dataset, model, cfg, neg_rng)
        n = len(users)
        n_batches = math.ceil(n / cfg.batch_size)
        kl_weight = cfg.kl_weight if cfg.kl_weight is not None else 1.0 / n_batches
        order = shuffle_rng.permutation(n)
        sums = np.zeros(4)
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            sums += model.loss_and_grads(users[idx], items[idx], y[idx], kl_weight,
                                         noise_rng, drop_rng, cfg.train_samples)
            model.optimizer_step(optimizer, params)
        trace.loss.append(sums[0] / n_batches)
        trace.nll.append(sums[1] / n_batches)
        trace.kl.append(sums[2] / n_batches)
        trace.mse.append(sums[3] / n)
        if progress:
            progress(epoch, trace)
        log.debug("epoch %d loss %.4f mse %.5f", epoch, trace.loss[-1], trace.mse[-1])
    return model, trace

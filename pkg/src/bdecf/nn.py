"""Dense-network building blocks with explicit backward passes.

Every layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``self.grads`` on ``backward``.
Batches are row-major: an input batch has shape ``(batch, in_dim)`` and
weights are stored ``(in_dim, out_dim)`` so that ``y = x @ W + b``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import kernels

ACTIVATIONS = ("relu", "identity", "sigmoid")


class NonFiniteError(FloatingPointError):
    """Raised when a loss, gradient or parameter stops being finite."""


def glorot_uniform(rng, fan_in, fan_out, dtype=np.float64):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activate(z, activation):
    if activation == "relu":
        return np.maximum(z, 0)
    if activation == "sigmoid":
        return sigmoid(z)
    return z


def _activation_grad(dout, z, y, activation):
    if activation == "relu":
        return dout * (z > 0)
    if activation == "sigmoid":
        return dout * y * (1 - y)
    return dout


class Module:
    """Minimal parameter container: own ``params`` plus named child modules."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def children(self) -> dict[str, "Module"]:
        return {}

    def named_parameters(self, prefix=""):
        for name, p in self.params.items():
            yield prefix + name, p
        for cname, child in self.children().items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_grads(self, prefix=""):
        for name in self.params:
            yield prefix + name, self.grads[name]
        for cname, child in self.children().items():
            yield from child.named_grads(f"{prefix}{cname}.")

    def parameters(self) -> dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def gradients(self) -> dict[str, np.ndarray]:
        return dict(self.named_grads())

    def zero_grad(self):
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)
        for child in self.children().values():
            child.zero_grad()

    def load_parameters(self, values: dict[str, np.ndarray], prefix=""):
        for name, p in self.params.items():
            src = np.asarray(values[prefix + name])
            if src.shape != p.shape:
                raise ValueError(f"shape mismatch for {prefix + name}: {src.shape} vs {p.shape}")
            p[...] = src
        for cname, child in self.children().items():
            child.load_parameters(values, f"{prefix}{cname}.")

    def clear_cache(self):
        """Drop activations kept for backward (they can be large after inference)."""
        for attr in [a for a in vars(self) if a.endswith("_cache")]:
            setattr(self, attr, None)
        for child in self.children().values():
            child.clear_cache()

    def astype(self, dtype):
        for name in self.params:
            self.params[name] = self.params[name].astype(dtype)
        for child in self.children().values():
            child.astype(dtype)
        self.zero_grad()
        return self


class Dense(Module):
    def __init__(self, in_dim, out_dim, activation="relu", rng=None, dtype=np.float64):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = np.random.default_rng(rng)
        self.in_dim, self.out_dim, self.activation = in_dim, out_dim, activation
        self.params["W"] = glorot_uniform(rng, in_dim, out_dim, dtype)
        self.params["b"] = np.zeros(out_dim, dtype=dtype)
        self.zero_grad()

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {x.shape[-1]}")
        z = x @ self.params["W"] + self.params["b"]
        y = _activate(z, self.activation)
        self._cache = (x, z, y)
        return y

    def backward(self, dout):
        x, z, y = self._cache
        dz = _activation_grad(dout, z, y, self.activation)
        self.grads["W"] += x.T @ dz
        self.grads["b"] += dz.sum(axis=0)
        return dz @ self.params["W"].T


def dense_forward(layer: Dense, x):
    """Evaluate one layer on a single input vector (no caching)."""
    x = np.asarray(x, dtype=layer.params["W"].dtype)
    if x.ndim != 1 or x.shape[0] != layer.in_dim:
        raise ValueError(f"expected a vector of length {layer.in_dim}, got shape {x.shape}")
    return _activate(x @ layer.params["W"] + layer.params["b"], layer.activation)


class SparseRows:
    """Row-gather view of a CSR matrix used as a tower input.

    ``rows[b]`` selects the matrix row for batch element ``b``;
    ``exclude[b]`` names a column to leave out of that row (``-1`` for none).
    """

    def __init__(self, matrix, rows, exclude=None):
        self.matrix = matrix
        self.rows = np.ascontiguousarray(rows, dtype=np.int64)
        if exclude is None:
            exclude = np.full(len(self.rows), -1, dtype=np.int64)
        self.exclude = np.ascontiguousarray(exclude, dtype=np.int64)

    def __len__(self):
        return len(self.rows)

    def dense(self):
        out = self.matrix[self.rows].toarray()
        hit = self.exclude >= 0
        out[np.nonzero(hit)[0], self.exclude[hit]] = 0
        return out


class SparseInputDense(Dense):
    """First tower layer: accepts :class:`SparseRows` or a dense batch."""

    def forward(self, x):
        if not isinstance(x, SparseRows):
            return super().forward(x)
        m = x.matrix
        if m.shape[1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {m.shape[1]}")
        W = self.params["W"]
        values = m.data if m.data.dtype == W.dtype else m.data.astype(W.dtype)
        z = kernels.sparse_rows_matmul(
            m.indptr, m.indices, values, x.rows, x.exclude, W
        ) + self.params["b"]
        y = _activate(z, self.activation)
        self._cache = (x, z, y)
        return y

    def backward(self, dout):
        x, z, y = self._cache
        if not isinstance(x, SparseRows):
            return super().backward(dout)
        dz = np.ascontiguousarray(_activation_grad(dout, z, y, self.activation))
        m = x.matrix
        gW = self.grads["W"]
        values = m.data if m.data.dtype == gW.dtype else m.data.astype(gW.dtype)
        kernels.sparse_rows_matmul_grad(m.indptr, m.indices, values, x.rows, x.exclude, dz, gW)
        self.grads["b"] += dz.sum(axis=0)
        return None


class Sequential(Module):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return {str(i): layer for i, layer in enumerate(self.layers)}

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


def mlp(dims, rng, hidden_activation="relu", out_activation="identity", dtype=np.float64):
    """Stack of :class:`Dense` layers over consecutive pairs in ``dims``."""
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        act = out_activation if i == len(dims) - 2 else hidden_activation
        layers.append(Dense(a, b, act, rng=rng, dtype=dtype))
    return Sequential(layers)


# ---------------------------------------------------------------- optimizers


class Optimizer:
    kind = "base"

    def __init__(self, learning_rate=1e-3):
        if not learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        self.learning_rate = float(learning_rate)

    @staticmethod
    def _check(params, grads):
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name}")


class SGD(Optimizer):
    """Plain gradient descent, ``p <- p - lr * g``."""

    kind = "sgd"

    def step(self, params, grads):
        self._check(params, grads)
        lr = self.learning_rate
        for name, p in params.items():
            p -= lr * grads[name]


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(learning_rate)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, grads):
        self._check(params, grads)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind="adam", learning_rate=1e-3):
    if kind == "sgd":
        return SGD(learning_rate)
    if kind == "adam":
        return Adam(learning_rate)
    raise ValueError(f"unknown optimizer {kind!r}")


def optimizer_step(params, grads, optimizer):
    """Apply one update in place and return ``params``."""
    optimizer.step(params, grads)
    return params


# ---------------------------------------------------------------- checkpoints

MAGIC = b"BDECFCK1"


def save_container(path, arrays: dict, meta: dict | None = None):
    """Write named arrays as row-major little-endian float64 plus JSON metadata.

    Layout: ``MAGIC | u64 header length | JSON header | raw payload``.
    The header maps each name to ``{"shape", "offset"}`` (offset in bytes
    into the payload) and carries ``meta`` verbatim. Output is byte-stable
    for identical inputs.
    """
    index = {}
    chunks = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f8"))
        index[name] = {"shape": list(a.shape), "offset": offset}
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"arrays": index, "meta": meta or {}}, sort_keys=True).encode()
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_container(path):
    """Inverse of :func:`save_container`; returns ``(arrays, meta)``."""
    with open(Path(path), "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint container")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        payload = fh.read()
    arrays = {}
    for name, info in header["arrays"].items():
        shape = tuple(info["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(
            payload, dtype="<f8", count=count, offset=info["offset"]
        ).reshape(shape).copy()
    return arrays, header["meta"]

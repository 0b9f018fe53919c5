"""Pure numpy/scipy implementations of the hot kernels.

Used when the compiled extension is unavailable or ``BDECF_PURE_PYTHON=1``.
"""

import numpy as np
import scipy.sparse as sp


def _batch_matrix(indptr, indices, values, rows, exclude, n_cols):
    starts = indptr[rows]
    counts = indptr[rows + 1] - starts
    batch_row = np.repeat(np.arange(len(rows)), counts)
    # positions of every gathered nonzero inside the source arrays
    pos = np.repeat(starts - np.cumsum(counts) + counts, counts) + np.arange(counts.sum())
    cols = indices[pos]
    vals = values[pos]
    keep = cols != exclude[batch_row]
    return sp.csr_matrix(
        (vals[keep], (batch_row[keep], cols[keep])), shape=(len(rows), n_cols)
    )


def sparse_rows_matmul(indptr, indices, values, rows, exclude, W):
    X = _batch_matrix(indptr, indices, values, rows, exclude, W.shape[0])
    return np.asarray(X @ W, dtype=W.dtype)


def sparse_rows_matmul_grad(indptr, indices, values, rows, exclude, G, gW):
    X = _batch_matrix(indptr, indices, values, rows, exclude, gW.shape[0])
    gW += np.asarray(X.T @ G, dtype=gW.dtype)


def attention_forward(Q, K, V, mask=None):
    scale = 1.0 / np.sqrt(Q.shape[-1])
    scores = np.matmul(Q, np.swapaxes(K, -1, -2)) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    mixed = probs if mask is None else probs * mask
    return np.matmul(mixed, V), probs


def attention_backward(dout, probs, Q, K, V, mask=None):
    scale = 1.0 / np.sqrt(Q.shape[-1])
    mixed = probs if mask is None else probs * mask
    dV = np.matmul(np.swapaxes(mixed, -1, -2), dout)
    dA = np.matmul(dout, np.swapaxes(V, -1, -2))
    if mask is not None:
        dA = dA * mask
    dS = probs * (dA - (dA * probs).sum(axis=-1, keepdims=True)) * scale
    dQ = np.matmul(dS, K)
    dK = np.matmul(np.swapaxes(dS, -1, -2), Q)
    return dQ, dK, dV


def target_ranks(scores, item_ids):
    s0 = scores[:, :1]
    id0 = item_ids[:, :1]
    above = (scores[:, 1:] > s0) | ((scores[:, 1:] == s0) & (item_ids[:, 1:] < id0))
    return 1 + above.sum(axis=1).astype(np.int64)

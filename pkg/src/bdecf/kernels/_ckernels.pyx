# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Signatures mirror ``_pykernels`` exactly."""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, sqrt

cnp.import_array()


def sparse_rows_matmul(const long[::1] indptr, const long[::1] indices,
                       const floating[::1] values, const long[::1] rows,
                       const long[::1] exclude, const floating[:, ::1] W):
    """out[b] = sum_k values[k] * W[indices[k]] over row ``rows[b]``, skipping ``exclude[b]``."""
    cdef Py_ssize_t B = rows.shape[0], D = W.shape[1]
    cdef Py_ssize_t b, k, j, col, r
    cdef floating v
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((B, D), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    with nogil:
        for b in range(B):
            r = rows[b]
            for k in range(indptr[r], indptr[r + 1]):
                col = indices[k]
                if col == exclude[b]:
                    continue
                v = values[k]
                for j in range(D):
                    out[b, j] += v * W[col, j]
    return out_arr


def sparse_rows_matmul_grad(const long[::1] indptr, const long[::1] indices,
                            const floating[::1] values, const long[::1] rows,
                            const long[::1] exclude, const floating[:, ::1] G,
                            floating[:, ::1] gW):
    """Accumulate ``X^T G`` into ``gW`` for the row gather above (in place)."""
    cdef Py_ssize_t B = rows.shape[0], D = G.shape[1]
    cdef Py_ssize_t b, k, j, col, r
    cdef floating v
    with nogil:
        for b in range(B):
            r = rows[b]
            for k in range(indptr[r], indptr[r + 1]):
                col = indices[k]
                if col == exclude[b]:
                    continue
                v = values[k]
                for j in range(D):
                    gW[col, j] += v * G[b, j]


def attention_forward(const floating[:, :, :, ::1] Q, const floating[:, :, :, ::1] K,
                      const floating[:, :, :, ::1] V, mask=None):
    """Scaled dot-product attention per (batch, head); softmax over the key axis.

    Returns ``(out, probs)`` where ``probs`` is the pre-dropout softmax.
    ``mask`` (same shape as probs) multiplies the probabilities before the value mix.
    """
    cdef Py_ssize_t B = Q.shape[0], H = Q.shape[1], T = Q.shape[2], dk = Q.shape[3]
    cdef Py_ssize_t b, h, i, j, c
    cdef floating scale = 1.0 / sqrt(<double>dk)
    cdef floating s, m, tot, a
    cdef bint use_mask = mask is not None
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((B, H, T, dk), dtype=dtype)
    probs_arr = np.empty((B, H, T, T), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef floating[:, :, :, ::1] P = probs_arr
    cdef floating[:, :, :, ::1] M
    if use_mask:
        M = mask
    with nogil:
        for b in range(B):
            for h in range(H):
                for i in range(T):
                    m = -1e300 if floating is double else -3e38
                    for j in range(T):
                        s = 0
                        for c in range(dk):
                            s = s + Q[b, h, i, c] * K[b, h, j, c]
                        s = s * scale
                        P[b, h, i, j] = s
                        if s > m:
                            m = s
                    tot = 0
                    for j in range(T):
                        a = exp(P[b, h, i, j] - m)
                        P[b, h, i, j] = a
                        tot = tot + a
                    for j in range(T):
                        P[b, h, i, j] = P[b, h, i, j] / tot
                        a = P[b, h, i, j]
                        if use_mask:
                            a = a * M[b, h, i, j]
                        for c in range(dk):
                            out[b, h, i, c] += a * V[b, h, j, c]
    return out_arr, probs_arr


def attention_backward(const floating[:, :, :, ::1] dout, const floating[:, :, :, ::1] probs,
                       const floating[:, :, :, ::1] Q, const floating[:, :, :, ::1] K,
                       const floating[:, :, :, ::1] V, mask=None):
    """Gradients ``(dQ, dK, dV)`` of :func:`attention_forward`."""
    cdef Py_ssize_t B = Q.shape[0], H = Q.shape[1], T = Q.shape[2], dk = Q.shape[3]
    cdef Py_ssize_t b, h, i, j, c
    cdef floating scale = 1.0 / sqrt(<double>dk)
    cdef floating s, dot, a
    cdef bint use_mask = mask is not None
    dtype = np.float32 if floating is float else np.float64
    dQ_arr = np.zeros((B, H, T, dk), dtype=dtype)
    dK_arr = np.zeros((B, H, T, dk), dtype=dtype)
    dV_arr = np.zeros((B, H, T, dk), dtype=dtype)
    dA_arr = np.empty(T, dtype=dtype)
    cdef floating[:, :, :, ::1] dQ = dQ_arr
    cdef floating[:, :, :, ::1] dK = dK_arr
    cdef floating[:, :, :, ::1] dV = dV_arr
    cdef floating[::1] dA = dA_arr
    cdef floating[:, :, :, ::1] M
    if use_mask:
        M = mask
    with nogil:
        for b in range(B):
            for h in range(H):
                for i in range(T):
                    dot = 0
                    for j in range(T):
                        a = probs[b, h, i, j]
                        s = 0
                        for c in range(dk):
                            s = s + dout[b, h, i, c] * V[b, h, j, c]
                        if use_mask:
                            s = s * M[b, h, i, j]
                            a = a * M[b, h, i, j]
                        for c in range(dk):
                            dV[b, h, j, c] += a * dout[b, h, i, c]
                        dA[j] = s
                        dot = dot + s * probs[b, h, i, j]
                    for j in range(T):
                        s = probs[b, h, i, j] * (dA[j] - dot) * scale
                        for c in range(dk):
                            dQ[b, h, i, c] += s * K[b, h, j, c]
                            dK[b, h, j, c] += s * Q[b, h, i, c]
    return dQ_arr, dK_arr, dV_arr


def target_ranks(const double[:, ::1] scores, const long[:, ::1] item_ids):
    """1-based rank of column 0 per row; ties go to the smaller item id."""
    cdef Py_ssize_t U = scores.shape[0], C = scores.shape[1]
    cdef Py_ssize_t u, j
    cdef double s0
    cdef long id0, r
    ranks_arr = np.empty(U, dtype=np.int64)
    cdef long[::1] ranks = ranks_arr
    with nogil:
        for u in range(U):
            s0 = scores[u, 0]
            id0 = item_ids[u, 0]
            r = 1
            for j in range(1, C):
                if scores[u, j] > s0 or (scores[u, j] == s0 and item_ids[u, j] < id0):
                    r = r + 1
            ranks[u] = r
    return ranks_arr

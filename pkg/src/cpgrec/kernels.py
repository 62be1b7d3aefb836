"""Hot inner loops: CSR sparse x dense products and the batched BPR/NSR term.

Each kernel exists twice, a numba version and a pure-numpy version, with
the same summation order so both produce the same bits. The public names
dispatch according to :data:`cpgrec._accel.USE_NUMBA`.
"""
import numpy as np

from ._accel import USE_NUMBA, njit, prange

__all__ = ["csr_spmm", "bpr_nsr_batch", "csr_spmm_numba", "csr_spmm_numpy",
           "bpr_nsr_batch_numba", "bpr_nsr_batch_numpy"]


@njit(cache=True, parallel=True)
def csr_spmm_numba(indptr, indices, data, x):
    n = indptr.shape[0] - 1
    d = x.shape[1]
    out = np.zeros((n, d), dtype=np.float64)
    # rows are independent; within a row, neighbors are summed in stored order
    for r in prange(n):
        for p in range(indptr[r], indptr[r + 1]):
            c = indices[p]
            w = data[p]
            for k in range(d):
                out[r, k] += w * x[c, k]
    return out


def csr_spmm_numpy(indptr, indices, data, x):
    n = indptr.shape[0] - 1
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros((n, x.shape[1]), dtype=np.float64)
    if indices.shape[0] == 0:
        return out
    rows = np.repeat(np.arange(n), np.diff(indptr))
    # ufunc.at accumulates unbuffered, in index order
    np.add.at(out, rows, data[:, None] * x[indices])
    return out


@njit(cache=True)
def _log_sigmoid(x):
    if x >= 0:
        return -np.log1p(np.exp(-x))
    return x - np.log1p(np.exp(x))


@njit(cache=True)
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    z = np.exp(x)
    return z / (1.0 + z)


@njit(cache=True)
def bpr_nsr_batch_numba(eu, ei, users, pos, neg, m, use_nsr):
    b = users.shape[0]
    d = eu.shape[1]
    grad_u = np.zeros(eu.shape, dtype=np.float64)
    grad_i = np.zeros(ei.shape, dtype=np.float64)
    total = 0.0
    for t in range(b):
        u = users[t]
        i = pos[t]
        j = neg[t]
        r_pos = 0.0
        r_neg = 0.0
        for k in range(d):
            r_pos += eu[u, k] * ei[i, k]
        for k in range(d):
            r_neg += eu[u, k] * ei[j, k]
        if use_nsr:
            s = _sigmoid(r_neg)
            r_tilde = m * s * r_neg
            slope = m * s * (1.0 + r_neg * (1.0 - s))
        else:
            r_tilde = r_neg
            slope = 1.0
        x = r_pos - r_tilde
        total += -_log_sigmoid(x)
        # d(-log sigma(x))/dx = -sigma(-x)
        dx = -_sigmoid(-x) / b
        for k in range(d):
            grad_u[u, k] += dx * (ei[i, k] - slope * ei[j, k])
        for k in range(d):
            grad_i[i, k] += dx * eu[u, k]
        for k in range(d):
            grad_i[j, k] += -dx * slope * eu[u, k]
    return total / b, grad_u, grad_i


def _np_log_sigmoid(x):
    return np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(-np.abs(x))))


def _np_sigmoid(x):
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def bpr_nsr_batch_numpy(eu, ei, users, pos, neg, m, use_nsr):
    b = users.shape[0]
    eu = np.asarray(eu, dtype=np.float64)
    ei = np.asarray(ei, dtype=np.float64)
    ue = eu[users]
    r_pos = np.einsum("bd,bd->b", ue, ei[pos])
    r_neg = np.einsum("bd,bd->b", ue, ei[neg])
    if use_nsr:
        s = _np_sigmoid(r_neg)
        r_tilde = m * s * r_neg
        slope = m * s * (1.0 + r_neg * (1.0 - s))
    else:
        r_tilde = r_neg
        slope = np.ones_like(r_neg)
    x = r_pos - r_tilde
    total = float(np.sum(-_np_log_sigmoid(x)))
    dx = -_np_sigmoid(-x) / b
    grad_u = np.zeros(eu.shape)
    grad_i = np.zeros(ei.shape)
    np.add.at(grad_u, users, dx[:, None] * (ei[pos] - slope[:, None] * ei[neg]))
    # interleave positive and negative contributions to keep triple order
    idx = np.empty(2 * b, dtype=np.int64)
    idx[0::2] = pos
    idx[1::2] = neg
    contrib = np.empty((2 * b, ei.shape[1]))
    contrib[0::2] = dx[:, None] * ue
    contrib[1::2] = -(dx * slope)[:, None] * ue
    np.add.at(grad_i, idx, contrib)
    return total / b, grad_u, grad_i


if USE_NUMBA:
    _spmm = csr_spmm_numba
    _bpr = bpr_nsr_batch_numba
else:
    _spmm = csr_spmm_numpy
    _bpr = bpr_nsr_batch_numpy


def csr_spmm(indptr, indices, data, x):
    """Return ``A @ x`` for the CSR matrix ``(indptr, indices, data)`` in float64."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    return _spmm(indptr, indices, data, x)


def bpr_nsr_batch(eu, ei, users, pos, neg, m, use_nsr=True):
    """Mean BPR data term over triples and its gradients w.r.t. ``eu`` and ``ei``.

    The negative score is passed through ``m * sigmoid(r) * r`` when
    ``use_nsr`` is true.
    """
    eu = np.ascontiguousarray(eu, dtype=np.float64)
    ei = np.ascontiguousarray(ei, dtype=np.float64)
    users = np.ascontiguousarray(users, dtype=np.int64)
    pos = np.ascontiguousarray(pos, dtype=np.int64)
    neg = np.ascontiguousarray(neg, dtype=np.int64)
    if users.shape[0] == 0:
        return 0.0, np.zeros(eu.shape), np.zeros(ei.shape)
    return _bpr(eu, ei, users, pos, neg, float(m), bool(use_nsr))

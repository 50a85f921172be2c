"""Low-level numeric kernels shared by the forward and backward passes.

The edge-wise kernels are numba-compiled so that per-edge dot products and
scatter accumulations run fused over the (cache-resident) embedding matrix
instead of materializing gathered copies. The scatter kernels run serially
on purpose: accumulation order is then fixed, which keeps results
bit-identical across runs.
"""

import numba
import numpy as np
import scipy.sparse as sp

# workqueue is always available; the default layer probes TBB first and
# warns when the system TBB is too old.
numba.config.THREADING_LAYER = "workqueue"


@numba.njit(cache=True, parallel=True)
def edge_dot(u, v, a, b):
    """out[e] = sum_k a[u[e], k] * b[v[e], k]."""
    out = np.empty(u.shape[0])
    for e in numba.prange(u.shape[0]):
        acc = 0.0
        i, j = u[e], v[e]
        for k in range(a.shape[1]):
            acc += a[i, k] * b[j, k]
        out[e] = acc
    return out


@numba.njit(cache=True)
def edge_dot_backward(u, v, g, a, b, da, db):
    """Adjoint of edge_dot: da[u[e]] += g[e]*b[v[e]], db[v[e]] += g[e]*a[u[e]].

    da and db may alias (the symmetric case a is b); the loop body stays
    correct because every read of a/b precedes the paired write.
    """
    for e in range(u.shape[0]):
        i, j, ge = u[e], v[e], g[e]
        for k in range(a.shape[1]):
            ai = a[i, k]
            bj = b[j, k]
            da[i, k] += ge * bj
            db[j, k] += ge * ai


@numba.njit(cache=True)
def csr_row_sums(indptr, values):
    """Per-row sum of stored values of a CSR matrix."""
    n = indptr.shape[0] - 1
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for e in range(indptr[i], indptr[i + 1]):
            acc += values[e]
        out[i] = acc
    return out


def csr_matmul_dense(indptr, indices, values, n, x):
    """CSR (n x n) times dense (n x d), exact in float64."""
    m = sp.csr_matrix((values, indices, indptr), shape=(n, n), copy=False)
    return np.asarray(m @ x)

"""Symmetric sparse adjacency in CSR form and the algebra built on it.

Values are float64 throughout; walk counts below 2**53 are therefore
exact. Matrices are immutable after construction (the backing arrays are
marked read-only), which makes them safe to share across threads.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data import InteractionSet
from .errors import ValidationError
from .kernels import csr_matmul_dense, csr_row_sums

_DENSE_ORACLE_LIMIT = 4096


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Square CSR matrix with sorted, duplicate-free column indices."""

    n: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return self.col_indices.shape[0]

    @classmethod
    def wrap(cls, n, row_offsets, col_indices, values) -> "SparseMatrix":
        return cls(int(n),
                   _freeze(np.asarray(row_offsets, dtype=np.int64)),
                   _freeze(np.asarray(col_indices, dtype=np.int64)),
                   _freeze(np.asarray(values, dtype=np.float64)))

    @classmethod
    def from_scipy(cls, m) -> "SparseMatrix":
        m = m.tocsr()
        m.sum_duplicates()
        m.sort_indices()
        return cls.wrap(m.shape[0], m.indptr, m.indices, m.data)

    @classmethod
    def from_coo(cls, n, rows, cols, values) -> "SparseMatrix":
        """Build from triplets; duplicate positions are summed."""
        m = sp.coo_matrix((values, (rows, cols)), shape=(n, n))
        return cls.from_scipy(m)

    @classmethod
    def identity(cls, n) -> "SparseMatrix":
        idx = np.arange(n, dtype=np.int64)
        return cls.wrap(n, np.arange(n + 1), idx, np.ones(n))

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.col_indices, self.row_offsets),
                             shape=(self.n, self.n), copy=False)

    def to_dense(self) -> np.ndarray:
        if self.n > _DENSE_ORACLE_LIMIT:
            raise ValidationError(f"refusing to densify a {self.n}-node matrix")
        return self.to_scipy().toarray()

    def row(self, i: int):
        """(columns, values) of row i."""
        lo, hi = self.row_offsets[i], self.row_offsets[i + 1]
        return self.col_indices[lo:hi], self.values[lo:hi]

    def row_entry_ids(self) -> np.ndarray:
        """Row index of every stored entry, aligned with col_indices."""
        return np.repeat(np.arange(self.n, dtype=np.int64),
                         np.diff(self.row_offsets))

    def with_values(self, values: np.ndarray) -> "SparseMatrix":
        if values.shape != self.values.shape:
            raise ValidationError("replacement values misaligned with storage")
        return SparseMatrix.wrap(self.n, self.row_offsets, self.col_indices, values)


def validate_matrix(m: SparseMatrix, check_symmetry: bool = True) -> None:
    """Raise ValidationError if structural invariants are broken."""
    if m.row_offsets.shape[0] != m.n + 1 or m.row_offsets[0] != 0:
        raise ValidationError("row_offsets has wrong length or start")
    if np.any(np.diff(m.row_offsets) < 0) or m.row_offsets[-1] != m.nnz:
        raise ValidationError("row_offsets not monotone or inconsistent with nnz")
    if m.nnz and (m.col_indices.min() < 0 or m.col_indices.max() >= m.n):
        raise ValidationError("column index out of range")
    for i in range(m.n):
        cols = m.col_indices[m.row_offsets[i]:m.row_offsets[i + 1]]
        if cols.size > 1 and np.any(np.diff(cols) <= 0):
            raise ValidationError(f"row {i} has unsorted or duplicate columns")
    if check_symmetry and not is_symmetric(m):
        raise ValidationError("matrix is not structurally symmetric with equal values")


def is_symmetric(m: SparseMatrix, tol: float = 0.0) -> bool:
    a = m.to_scipy()
    diff = a - a.T
    return diff.nnz == 0 or np.max(np.abs(diff.data)) <= tol


@dataclass(frozen=True)
class InteractionGraph:
    """Bipartite adjacency; users occupy [0, n_users), items the rest."""

    n_users: int
    n_items: int
    adjacency: SparseMatrix
    degrees: np.ndarray

    @property
    def n(self) -> int:
        return self.n_users + self.n_items


def build_bipartite(train: InteractionSet) -> InteractionGraph:
    """Unit-valued symmetric adjacency from training interactions."""
    if len(train) == 0:
        raise ValidationError("cannot build a graph from an empty training set")
    n = train.n_users + train.n_items
    u = train.pairs[:, 0]
    i = train.pairs[:, 1] + train.n_users
    rows = np.concatenate([u, i])
    cols = np.concatenate([i, u])
    adj = SparseMatrix.from_coo(n, rows, cols, np.ones(rows.shape[0]))
    degrees = np.diff(adj.row_offsets).astype(np.float64)
    return InteractionGraph(train.n_users, train.n_items, adj, _freeze(degrees))


def spmatmul(a: SparseMatrix, b: SparseMatrix) -> SparseMatrix:
    """Exact sparse product a @ b."""
    if a.n != b.n:
        raise ValidationError(f"dimension mismatch: {a.n} vs {b.n}")
    c = (a.to_scipy() @ b.to_scipy()).tocsr()
    c.eliminate_zeros()
    return SparseMatrix.from_scipy(c)


def spmv_dense(a: SparseMatrix, x: np.ndarray) -> np.ndarray:
    """Sparse times dense: (n x n) @ (n x d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != a.n:
        raise ValidationError(f"dense operand must be ({a.n}, d), got {x.shape}")
    return csr_matmul_dense(a.row_offsets, a.col_indices, a.values, a.n, x)


def bfs_distances(g: InteractionGraph, source: int) -> np.ndarray:
    """Exact hop distances from source; unreachable nodes are +inf."""
    adj = g.adjacency
    if not 0 <= source < adj.n:
        raise ValidationError(f"source {source} out of range for {adj.n} nodes")
    dist = np.full(adj.n, np.inf)
    dist[source] = 0.0
    frontier = np.asarray([source], dtype=np.int64)
    hop = 0
    while frontier.size:
        hop += 1
        neigh = np.concatenate(
            [adj.col_indices[adj.row_offsets[v]:adj.row_offsets[v + 1]]
             for v in frontier]) if frontier.size else frontier
        neigh = np.unique(neigh)
        neigh = neigh[np.isinf(dist[neigh])]
        dist[neigh] = hop
        frontier = neigh
    return dist


def symmetric_normalize(a: SparseMatrix) -> SparseMatrix:
    """Scale entry (u, v) by 1/sqrt(deg(u) * deg(v)).

    Degrees are the row sums of the stored values, so soft edge weights
    shrink them continuously. Rows whose value sum is zero are left
    all-zero rather than raising; the sparsity pattern is preserved
    exactly.
    """
    if a.nnz and a.values.min() < 0:
        raise ValidationError("symmetric_normalize requires non-negative values")
    deg = csr_row_sums(a.row_offsets, a.values)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    rows = a.row_entry_ids()
    new_values = a.values * inv_sqrt[rows] * inv_sqrt[a.col_indices]
    return a.with_values(new_values)


def write_matrix_text(m: SparseMatrix, path) -> None:
    """Debug dump: header line "n nnz", then "row col value" triples."""
    rows = m.row_entry_ids()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{m.n} {m.nnz}\n")
        for r, c, v in zip(rows, m.col_indices, m.values):
            fh.write(f"{r} {c} {float(v)!r}\n")


def read_matrix_text(path) -> SparseMatrix:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValidationError(f"bad matrix header in {path}")
        n, nnz = int(header[0]), int(header[1])
        rows = np.empty(nnz, dtype=np.int64)
        cols = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz)
        for e in range(nnz):
            parts = fh.readline().split()
            rows[e], cols[e], vals[e] = int(parts[0]), int(parts[1]), float(parts[2])
    return SparseMatrix.from_coo(n, rows, cols, vals)

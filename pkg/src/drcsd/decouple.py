"""Per-order interaction matrices keyed by exact shortest-path distance.

The order-l matrix keeps entry (u, v) exactly when the shortest path
between u and v has length l; its value is the number of length-l walks
joining them. Order 1 is the training adjacency itself. The stack is
computed once, before training, and can be cached to disk keyed by a
content hash of the source graph.
"""

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CapacityError, ValidationError
from .graph import InteractionGraph, SparseMatrix, bfs_distances

DEFAULT_MEMORY_BUDGET = 4 * 1024 ** 3  # bytes, applied to each walk-count power
_CACHE_MAGIC = b"DRCS"
_CACHE_VERSION = 2


@dataclass
class DecoupledStack:
    """Matrices for orders 1..order_count, pairwise support-disjoint."""

    order_count: int
    matrices: list
    cap: Optional[int] = None
    binary: bool = False
    n_users: int = 0
    n_items: int = 0


@dataclass
class DecouplingFailure:
    kind: str
    order: int
    node_u: int
    node_v: int
    expected: float
    actual: float

    def describe(self) -> str:
        return (f"{self.kind} at order {self.order}, entry "
                f"({self.node_u}, {self.node_v}): expected {self.expected}, "
                f"got {self.actual}")


@dataclass
class DecouplingReport:
    ok: bool
    n_nodes: int
    orders_checked: int
    entries_checked: int
    failure: Optional[DecouplingFailure] = None


def _estimate_product_nnz(a, p) -> int:
    """Upper bound on nnz(a @ p): sum over k of colcount_a(k)*rowcount_p(k)."""
    col_counts = np.bincount(a.indices, minlength=a.shape[0])
    row_counts = np.diff(p.indptr)
    return int(np.dot(col_counts.astype(np.int64), row_counts.astype(np.int64)))


def _cap_rows(dist_l, cap: int):
    """Keep the cap largest values per row (ties to the smaller column),
    then keep an entry if either direction survived."""
    import scipy.sparse as sp

    indptr, indices, values = dist_l.indptr, dist_l.indices, dist_l.data
    keep = np.ones(indices.shape[0], dtype=bool)
    for i in range(dist_l.shape[0]):
        lo, hi = indptr[i], indptr[i + 1]
        if hi - lo <= cap:
            continue
        order = np.lexsort((indices[lo:hi], -values[lo:hi]))
        keep[lo + order[cap:]] = False
    rows_all = np.repeat(np.arange(dist_l.shape[0], dtype=np.int64),
                         np.diff(indptr))
    kept = sp.csr_matrix(
        (np.ones(int(keep.sum())), (rows_all[keep], indices[keep])),
        shape=dist_l.shape)
    pattern = kept.maximum(kept.T)
    return dist_l.multiply(pattern).tocsr()


def decouple(g: InteractionGraph, order_count: int, cap: Optional[int] = None,
             *, binary: bool = False,
             memory_budget: int = DEFAULT_MEMORY_BUDGET) -> DecoupledStack:
    """Build the order-1..order_count matrices for the training graph.

    Walk-count powers P^l = A @ P^(l-1) are pruned against the union of
    lower-order supports plus the diagonal, leaving exactly the entries at
    shortest distance l. When cap is set, every row of the order-2+
    matrices retains only its cap largest-value entries (re-symmetrized),
    trading exactness for density control. The projected size of each
    power is checked against memory_budget before multiplying.
    """
    if not 1 <= order_count <= 6:
        raise ValidationError(f"order_count must lie in [1, 6], got {order_count}")
    if cap is not None and cap < 1:
        raise ValidationError(f"cap must be positive, got {cap}")
    adj = g.adjacency
    if adj.nnz == 0:
        raise ValidationError("graph has no edges")
    a = adj.to_scipy().astype(np.float64)
    matrices = [adj]
    power = a.copy()
    ones = np.ones_like(a.data)
    covered = a._with_data(ones, copy=True)
    covered = covered.maximum(_speye(adj.n))
    for l in range(2, order_count + 1):
        est_bytes = 16 * _estimate_product_nnz(a, power)
        if est_bytes > memory_budget:
            raise CapacityError(
                f"order {l} power is projected at {est_bytes} bytes, over the "
                f"{memory_budget}-byte budget; raise it or lower order_count")
        power = (a @ power).tocsr()
        power.sort_indices()
        dist_l = (power - power.multiply(covered)).tocsr()
        dist_l.eliminate_zeros()
        dist_l.sort_indices()
        if cap is not None and dist_l.nnz:
            dist_l = _cap_rows(dist_l, cap)
            dist_l.sort_indices()
        if binary and dist_l.nnz:
            dist_l.data[:] = 1.0
        matrices.append(SparseMatrix.from_scipy(dist_l))
        pattern = power._with_data(np.ones_like(power.data), copy=True)
        covered = covered.maximum(pattern)
    return DecoupledStack(order_count, matrices, cap, binary,
                          g.n_users, g.n_items)


def _speye(n):
    import scipy.sparse as sp
    return sp.identity(n, format="csr", dtype=np.float64)


def verify_decoupling(g: InteractionGraph, stack: DecoupledStack) -> DecouplingReport:
    """Check every stack entry against two independent oracles.

    Supports must match BFS shortest distances exactly, and values must
    match dense matrix-power walk counts. Intended for test-scale graphs;
    refuses very large ones. The stack must have been built without cap
    (capping deliberately drops entries) and without the binary variant.
    """
    if stack.cap is not None:
        raise ValidationError("verify_decoupling requires a stack built without cap")
    if stack.binary:
        raise ValidationError("verify_decoupling requires walk-count values")
    adj = g.adjacency
    if adj.n > 4096:
        raise ValidationError("verification oracle is limited to 4096 nodes")
    dense_a = adj.to_dense()
    dense_power = dense_a.copy()
    entries = 0
    for order in range(1, stack.order_count + 1):
        if order > 1:
            dense_power = dense_a @ dense_power
        mat = stack.matrices[order - 1]
        for u in range(adj.n):
            dist = bfs_distances(g, u)
            expected_cols = np.flatnonzero(dist == order)
            cols, vals = mat.row(u)
            if not np.array_equal(cols, expected_cols):
                extra = np.setdiff1d(cols, expected_cols)
                missing = np.setdiff1d(expected_cols, cols)
                v = int(extra[0]) if extra.size else int(missing[0])
                kind = "unexpected entry" if extra.size else "missing entry"
                return DecouplingReport(False, adj.n, stack.order_count, entries,
                                        DecouplingFailure(kind, order, u, v,
                                                          float(order), np.inf))
            walk_counts = dense_power[u, cols]
            bad = np.flatnonzero(vals != walk_counts)
            if bad.size:
                j = bad[0]
                return DecouplingReport(False, adj.n, stack.order_count, entries,
                                        DecouplingFailure("wrong walk count", order,
                                                          u, int(cols[j]),
                                                          float(walk_counts[j]),
                                                          float(vals[j])))
            entries += cols.size
    return DecouplingReport(True, adj.n, stack.order_count, entries)


# ---------------------------------------------------------------------------
# On-disk cache, one binary file per order, keyed by a graph content hash.

def graph_content_hash(g: InteractionGraph) -> str:
    adj = g.adjacency
    h = hashlib.sha256()
    h.update(struct.pack("<qqq", g.n_users, g.n_items, adj.nnz))
    h.update(np.ascontiguousarray(adj.row_offsets, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(adj.col_indices, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(adj.values, dtype="<f8").tobytes())
    return h.hexdigest()


def _order_file(directory: Path, order: int) -> Path:
    return directory / f"order_{order:02d}.bin"


def save_stack(stack: DecoupledStack, g: InteractionGraph, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    digest = bytes.fromhex(graph_content_hash(g))
    for order, mat in enumerate(stack.matrices, start=1):
        header = _CACHE_MAGIC + struct.pack(
            "<IIqqqB", _CACHE_VERSION, order, mat.n, mat.nnz,
            -1 if stack.cap is None else stack.cap, 1 if stack.binary else 0)
        with open(_order_file(directory, order), "wb") as fh:
            fh.write(header)
            fh.write(digest)
            fh.write(np.ascontiguousarray(mat.row_offsets, dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(mat.col_indices, dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(mat.values, dtype="<f8").tobytes())


def load_stack(g: InteractionGraph, order_count: int, cap: Optional[int],
               binary: bool, directory) -> Optional[DecoupledStack]:
    """Load a cached stack; None when absent or stale."""
    directory = Path(directory)
    digest = bytes.fromhex(graph_content_hash(g))
    matrices = []
    for order in range(1, order_count + 1):
        path = _order_file(directory, order)
        if not path.exists():
            return None
        with open(path, "rb") as fh:
            blob = fh.read()
        head_len = len(_CACHE_MAGIC) + struct.calcsize("<IIqqqB")
        if len(blob) < head_len + 32 or blob[:4] != _CACHE_MAGIC:
            return None
        version, forder, n, nnz, fcap, fbinary = struct.unpack(
            "<IIqqqB", blob[4:head_len])
        fcap = None if fcap == -1 else fcap
        if (version != _CACHE_VERSION or forder != order or n != g.n
                or fcap != cap or bool(fbinary) != binary):
            return None
        off = head_len
        if blob[off:off + 32] != digest:
            return None
        off += 32
        offsets = np.frombuffer(blob, dtype="<i8", count=n + 1, offset=off)
        off += 8 * (n + 1)
        indices = np.frombuffer(blob, dtype="<i8", count=nnz, offset=off)
        off += 8 * nnz
        values = np.frombuffer(blob, dtype="<f8", count=nnz, offset=off)
        matrices.append(SparseMatrix.wrap(n, offsets.copy(), indices.copy(),
                                          values.copy()))
    return DecoupledStack(order_count, matrices, cap, binary,
                          g.n_users, g.n_items)


def load_or_decouple(g: InteractionGraph, order_count: int,
                     cap: Optional[int] = None, *, binary: bool = False,
                     cache_dir=None,
                     memory_budget: int = DEFAULT_MEMORY_BUDGET) -> DecoupledStack:
    """Fetch the stack from cache_dir when fresh, else compute and store it."""
    if cache_dir is not None:
        cached = load_stack(g, order_count, cap, binary, cache_dir)
        if cached is not None:
            return cached
    stack = decouple(g, order_count, cap, binary=binary,
                     memory_budget=memory_budget)
    if cache_dir is not None:
        save_stack(stack, g, cache_dir)
    return stack

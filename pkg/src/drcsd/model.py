"""Forward pass: embeddings, per-order hidden states, similarity-driven
stochastic edge masks, denoised normalized adjacencies, order-isolated
propagation and pooling.

Every order l propagates the initial embeddings through its own denoised
matrix (X_l depends only on X_0 and the order-l mask), so signals of
different orders never mix before the final pooling. Modes:

  full        the complete model
  no_denoise  every mask weight forced to 1 (keeps decoupled propagation)
  no_decouple classic propagation X^l = norm(A) @ X^(l-1), mean-pooled
  mf          no propagation at all; pooled output is X_0
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from .decouple import DecoupledStack
from .errors import NumericError, ValidationError
from .graph import SparseMatrix, spmv_dense, symmetric_normalize
from .kernels import edge_dot
from .rng import STREAM_INIT, STREAM_MASK, derive_seed, gumbel_pairs, rng_from

MASK_PROB_EPS = 1e-10
MODES = ("full", "no_denoise", "no_decouple", "mf")
HIDDEN_MODES = ("sequential", "all_orders")


@dataclass
class EmbeddingTable:
    """Trainable (n_users + n_items) x d matrix of node embeddings."""

    x0: np.ndarray

    @property
    def n(self) -> int:
        return self.x0.shape[0]

    @property
    def d(self) -> int:
        return self.x0.shape[1]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.x0.copy())


def init_embeddings(n: int, d: int, seed: int) -> EmbeddingTable:
    """Normal(0, 0.01) initialization, deterministic under seed."""
    if n < 1 or d < 1:
        raise ValidationError(f"need n, d >= 1, got n={n}, d={d}")
    x0 = rng_from(seed, STREAM_INIT).normal(0.0, 0.01, size=(n, d))
    return EmbeddingTable(x0)


@dataclass(frozen=True)
class EdgeLayout:
    """Canonical-edge bookkeeping for one symmetric matrix.

    Stored entries come in mirrored pairs; the canonical edge list keeps
    each undirected pair once as (u < v). canon_inverse maps every stored
    entry to its canonical id, canon_first picks one stored entry per
    canonical edge, transpose_perm maps entry (r, c) to entry (c, r).
    """

    n: int
    nnz: int
    rows: np.ndarray
    cols: np.ndarray
    canon_u: np.ndarray
    canon_v: np.ndarray
    canon_first: np.ndarray
    canon_inverse: np.ndarray
    transpose_perm: np.ndarray

    @property
    def canon_count(self) -> int:
        return self.canon_u.shape[0]


def edge_layout(m: SparseMatrix) -> EdgeLayout:
    """Build (and memoize on the matrix) the canonical edge layout."""
    cached = m.__dict__.get("_edge_layout")
    if cached is not None:
        return cached
    rows = m.row_entry_ids()
    cols = m.col_indices
    if np.any(rows == cols):
        raise ValidationError("edge layout requires an empty diagonal")
    lo = np.minimum(rows, cols)
    hi = np.maximum(rows, cols)
    key = lo * m.n + hi
    uniq, first, inverse = np.unique(key, return_index=True, return_inverse=True)
    if uniq.shape[0] * 2 != rows.shape[0]:
        raise ValidationError("matrix entries do not come in mirrored pairs")
    key_rc = rows * m.n + cols
    transpose_perm = np.searchsorted(key_rc, cols * m.n + rows)
    layout = EdgeLayout(m.n, m.nnz, rows, cols, uniq // m.n, uniq % m.n,
                        first, inverse, transpose_perm)
    object.__setattr__(m, "_edge_layout", layout)
    return layout


@dataclass
class EdgeMask:
    """Per-edge weights aligned with one matrix's storage.

    Mirrored entries share one weight. In hard mode weights are the 0/1
    argmax indicators and soft_weights keeps the differentiable values.
    """

    order: int
    weights: np.ndarray
    tau: float
    hard: bool = False
    noise_seed: Optional[int] = None
    soft_weights: Optional[np.ndarray] = None


def hidden_state(prior_outputs) -> np.ndarray:
    """Elementwise mean of the propagation outputs seen so far."""
    if len(prior_outputs) == 0:
        raise ValidationError("hidden_state needs at least one matrix")
    shape = prior_outputs[0].shape
    for m in prior_outputs[1:]:
        if m.shape != shape:
            raise ValidationError(f"shape mismatch: {m.shape} vs {shape}")
    total = prior_outputs[0].astype(np.float64, copy=True)
    for m in prior_outputs[1:]:
        total += m
    return total / len(prior_outputs)


def _similarity_canonical(h: np.ndarray, layout: EdgeLayout) -> np.ndarray:
    num = edge_dot(layout.canon_u, layout.canon_v, h, h)
    norm_sq = np.einsum("ij,ij->i", h, h)
    den = norm_sq[layout.canon_u] * norm_sq[layout.canon_v]
    safe = np.where(den > 0, den, 1.0)
    cos = num * np.where(den > 0, 1.0 / np.sqrt(safe), 0.0)
    return (cos + 1.0) * 0.5


def edge_similarity(h: np.ndarray, edges) -> np.ndarray:
    """Per-stored-entry similarity s = (cos(h_u, h_v) + 1) / 2.

    A zero-norm endpoint yields cos = 0, i.e. s = 0.5. edges may be a
    SparseMatrix or its EdgeLayout.
    """
    layout = edges if isinstance(edges, EdgeLayout) else edge_layout(edges)
    h = np.asarray(h, dtype=np.float64)
    if not np.all(np.isfinite(h)):
        raise NumericError("hidden state contains non-finite values")
    if h.shape[0] != layout.n:
        raise ValidationError(f"hidden state has {h.shape[0]} rows, expected {layout.n}")
    return _similarity_canonical(h, layout)[layout.canon_inverse]


def _mask_weights_canonical(s_canon, tau, noise):
    p1 = np.clip(s_canon, MASK_PROB_EPS, 1.0 - MASK_PROB_EPS)
    p2 = 1.0 - p1
    logit = (np.log(p1) - np.log(p2) + (noise[:, 0] - noise[:, 1])) / tau
    return expit(logit), logit


def gumbel_mask(edges, s: np.ndarray, tau: float, seed: int = 0,
                hard: bool = False, deterministic: bool = False,
                order: int = 0) -> EdgeMask:
    """Sample one relaxed keep/drop weight per canonical edge.

    Per canonical edge the two-way probability vector [s, 1-s] is clamped
    away from {0, 1}, perturbed with a pair of Gumbel(0, 1) draws and
    pushed through a temperature-tau softmax; the weight is the
    similarity-slot component, shared by both mirrored entries. With
    deterministic=True the noise is zero (used at evaluation time); with
    hard=True the weight is the argmax indicator and the soft value is
    recorded separately.
    """
    if tau <= 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    layout = edges if isinstance(edges, EdgeLayout) else edge_layout(edges)
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise NumericError("similarities contain non-finite values")
    if s.shape[0] == layout.nnz:
        s_canon = s[layout.canon_first]
    elif s.shape[0] == layout.canon_count:
        s_canon = s
    else:
        raise ValidationError(
            f"{s.shape[0]} similarities do not align with {layout.nnz} entries")
    if s_canon.size and (s_canon.min() < -1e-9 or s_canon.max() > 1 + 1e-9):
        raise ValidationError("similarities must lie in [0, 1]")
    s_canon = np.clip(s_canon, 0.0, 1.0)
    noise = (np.zeros((layout.canon_count, 2))
             if deterministic else gumbel_pairs(seed, layout.canon_count))
    soft, logit = _mask_weights_canonical(s_canon, tau, noise)
    if hard:
        weights = (logit >= 0).astype(np.float64)
        return EdgeMask(order, weights[layout.canon_inverse], tau, True,
                        None if deterministic else seed,
                        soft[layout.canon_inverse])
    return EdgeMask(order, soft[layout.canon_inverse], tau, False,
                    None if deterministic else seed)


def unit_mask(edges, tau: float, order: int = 0) -> EdgeMask:
    layout = edges if isinstance(edges, EdgeLayout) else edge_layout(edges)
    return EdgeMask(order, np.ones(layout.nnz), tau)


def denoise_adjacency(a_hat: SparseMatrix, mask: EdgeMask) -> SparseMatrix:
    """Hadamard-mask the order matrix, then symmetrically normalize it.

    Normalization degrees are the row sums of the masked values, so fully
    masked rows come out all-zero.
    """
    if mask.weights.shape[0] != a_hat.nnz:
        raise ValidationError(
            f"mask with {mask.weights.shape[0]} weights misaligned with "
            f"{a_hat.nnz} stored entries")
    return symmetric_normalize(a_hat.with_values(a_hat.values * mask.weights))


@dataclass
class ForwardState:
    """Everything one forward pass produced."""

    mode: str
    pooled: np.ndarray
    outputs: list
    hidden: list
    masks: list
    denoised: list


def _pool(parts) -> np.ndarray:
    total = parts[0].astype(np.float64, copy=True)
    for p in parts[1:]:
        total += p
    return total / len(parts)


def forward(emb: EmbeddingTable, stack: DecoupledStack, mode: str = "full",
            tau: float = 0.5, seed: int = 0, *, hard: bool = False,
            deterministic: bool = False, hidden_mode: str = "sequential",
            mask_weights=None) -> ForwardState:
    """Run one forward pass and return all intermediate state.

    Per-order Gumbel noise comes from sub-seeds derived from (seed, order).
    mask_weights, when given, is one weight array per order that replaces
    similarity-driven sampling (used for ablations and tests).
    hidden_mode="all_orders" computes one shared hidden state from a
    unit-mask pre-pass over orders 1..L-1 instead of the default
    running-mean of the current pass.
    """
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}")
    if hidden_mode not in HIDDEN_MODES:
        raise ValidationError(f"unknown hidden_mode {hidden_mode!r}")
    x0 = emb.x0
    order_count = stack.order_count
    if stack.matrices[0].n != x0.shape[0]:
        raise ValidationError(
            f"embeddings have {x0.shape[0]} rows but the graph has "
            f"{stack.matrices[0].n} nodes")

    if mode == "mf":
        return ForwardState(mode, x0.copy(), [], [], [], [])

    if mode == "no_decouple":
        base = symmetric_normalize(stack.matrices[0])
        outputs = []
        x = x0
        for _ in range(order_count):
            x = spmv_dense(base, x)
            outputs.append(x)
        return ForwardState(mode, _pool([x0] + outputs), outputs, [], [], [])

    hidden_source = None
    if hidden_mode == "all_orders" and order_count >= 2:
        pre = [x0]
        for mat in stack.matrices[:order_count - 1]:
            pre.append(spmv_dense(symmetric_normalize(mat), x0))
        hidden_source = _pool(pre)

    seen = [x0]
    outputs, hidden, masks, denoised = [], [], [], []
    for order in range(1, order_count + 1):
        mat = stack.matrices[order - 1]
        layout = edge_layout(mat)
        h = hidden_source if hidden_source is not None else _pool(seen)
        hidden.append(h)
        if mode == "no_denoise":
            mask = unit_mask(layout, tau, order)
        elif mask_weights is not None:
            w = np.asarray(mask_weights[order - 1], dtype=np.float64)
            if w.shape[0] != layout.nnz:
                raise ValidationError(f"mask override for order {order} misaligned")
            mask = EdgeMask(order, w, tau)
        else:
            s = _similarity_canonical(h, layout)
            mask = gumbel_mask(layout, s, tau, derive_seed(seed, STREAM_MASK, order),
                               hard, deterministic, order)
        a_tilde = denoise_adjacency(mat, mask)
        x_l = spmv_dense(a_tilde, x0)
        seen.append(x_l)
        outputs.append(x_l)
        masks.append(mask)
        denoised.append(a_tilde)
    return ForwardState(mode, _pool([x0] + outputs), outputs, hidden, masks,
                        denoised)


def score(x: np.ndarray, n_users: int, user: int, item: int) -> float:
    """Inner-product preference score from pooled embeddings."""
    n_items = x.shape[0] - n_users
    if not 0 <= user < n_users:
        raise ValidationError(f"user {user} out of range [0, {n_users})")
    if not 0 <= item < n_items:
        raise ValidationError(f"item {item} out of range [0, {n_items})")
    return float(np.dot(x[user], x[n_users + item]))


# ---------------------------------------------------------------------------
# Checkpoints: JSON header plus little-endian float64 row-major payload.

@dataclass
class Checkpoint:
    embeddings: EmbeddingTable
    meta: dict


def save_checkpoint(base_path, ckpt: Checkpoint) -> None:
    """Write <base>.json and <base>.bin."""
    base = Path(base_path)
    x0 = ckpt.embeddings.x0
    meta = dict(ckpt.meta)
    meta["payload"] = base.name + ".bin"
    meta["rows"] = x0.shape[0]
    meta["d"] = x0.shape[1]
    base.parent.mkdir(parents=True, exist_ok=True)
    with open(base.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(base.with_suffix(".bin"), "wb") as fh:
        fh.write(np.ascontiguousarray(x0, dtype="<f8").tobytes())


def load_checkpoint(base_path) -> Checkpoint:
    base = Path(base_path)
    json_path = base.with_suffix(".json")
    with open(json_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    payload = base.parent / meta["payload"]
    raw = np.frombuffer(payload.read_bytes(), dtype="<f8")
    rows, d = meta["rows"], meta["d"]
    expected = (meta["n_users"] + meta["n_items"]) * d
    if rows != meta["n_users"] + meta["n_items"] or raw.size != expected:
        raise ValidationError(
            f"checkpoint payload has {raw.size} values, expected "
            f"({meta['n_users']} users + {meta['n_items']} items) x {d}")
    x0 = raw.reshape(rows, d).astype(np.float64)
    if not np.all(np.isfinite(x0)):
        raise NumericError("checkpoint payload contains non-finite values")
    return Checkpoint(EmbeddingTable(x0), meta)

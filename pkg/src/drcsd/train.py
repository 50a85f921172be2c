"""Loss computation, exact gradients, Adam stepping and the epoch loop.

The ranking objective is the batch-mean BPR loss; the denoising objective
sums, over orders and stored entries, the absolute difference between the
denoised and the unmasked normalized matrices; both combine with L2
regularization of the embedding table into one total loss trained
end-to-end. Gradients come from the torch mirror of the forward pass
(see _autograd); the numpy path in batch_loss computes the same losses
independently and is what finite-difference checks probe.
"""

import hashlib
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import data as data_mod
from . import eval as eval_mod
from .decouple import DecoupledStack, load_or_decouple
from .errors import NumericError, ValidationError
from .graph import build_bipartite, symmetric_normalize
from .model import (Checkpoint, EmbeddingTable, forward, init_embeddings)
from .rng import STREAM_MASK, STREAM_NEG, STREAM_SHUFFLE, derive_seed, rng_from

LOG_COLUMNS = ("epoch", "loss_total", "loss_bpr", "loss_ld", "loss_reg",
               "val_recall@20", "seconds")


@dataclass
class TrainConfig:
    """Hyperparameters; the tuned grids are L in {2, 3}, lr in [1e-5, 1e-3],
    beta in {0.3, 0.4, 0.5} and l2_coeff in {1e-3, 1e-4, 1e-5}."""

    d: int = 64
    order_count: int = 2
    batch_size: int = 2048
    learning_rate: float = 1e-3
    beta: float = 0.4
    l2_coeff: float = 1e-4
    tau: float = 0.5
    patience: int = 10
    max_epochs: int = 300
    seed: int = 0
    mode: str = "full"
    cap: Optional[int] = None
    binary_decouple: bool = False
    hard_mask: bool = False
    hidden_mode: str = "sequential"

    def validate(self) -> None:
        if self.d < 1 or self.batch_size < 1:
            raise ValidationError("d and batch_size must be positive")
        if not 1 <= self.order_count <= 6:
            raise ValidationError(f"order_count must lie in [1, 6], got {self.order_count}")
        if self.learning_rate <= 0 or self.tau <= 0:
            raise ValidationError("learning_rate and tau must be positive")
        if self.beta < 0 or self.l2_coeff < 0:
            raise ValidationError("beta and l2_coeff must be non-negative")
        if self.patience < 1 or self.max_epochs < 1:
            raise ValidationError("patience and max_epochs must be at least 1")
        if self.mode not in ("full", "no_denoise", "no_decouple", "mf"):
            raise ValidationError(f"unknown mode {self.mode!r}")
        if self.hidden_mode not in ("sequential", "all_orders"):
            raise ValidationError(f"unknown hidden_mode {self.hidden_mode!r}")


def config_hash(cfg: TrainConfig) -> str:
    text = ",".join(f"{k}={getattr(cfg, k)}" for k in sorted(vars(cfg)))
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class LossTerms:
    bpr: float
    ld: float
    reg: float
    total: float


@dataclass
class GradientBundle:
    d_x0: np.ndarray
    loss_terms: LossTerms


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def bpr_loss(y_pos: np.ndarray, y_neg: np.ndarray) -> float:
    """Mean of -log sigmoid(y_pos - y_neg), stabilized for large margins."""
    y_pos = np.asarray(y_pos, dtype=np.float64)
    y_neg = np.asarray(y_neg, dtype=np.float64)
    if y_pos.shape != y_neg.shape:
        raise ValidationError(f"batch shapes differ: {y_pos.shape} vs {y_neg.shape}")
    if y_pos.size == 0:
        raise ValidationError("empty batch")
    return float(np.mean(_softplus(-(y_pos - y_neg))))


def ld_loss(denoised, reference) -> float:
    """Sum over orders and stored entries of |denoised - reference|."""
    if len(denoised) != len(reference):
        raise ValidationError("order count mismatch between matrix lists")
    total = 0.0
    for d_mat, r_mat in zip(denoised, reference):
        if (d_mat.n != r_mat.n
                or not np.array_equal(d_mat.row_offsets, r_mat.row_offsets)
                or not np.array_equal(d_mat.col_indices, r_mat.col_indices)):
            raise ValidationError("sparsity patterns are not aligned")
        total += float(np.sum(np.abs(d_mat.values - r_mat.values)))
    return total


def l2_reg(emb: EmbeddingTable) -> float:
    """Squared Frobenius norm of the embedding table."""
    return float(np.sum(emb.x0 * emb.x0))


def reference_normalized(stack: DecoupledStack) -> list:
    """Unmasked normalized matrices, memoized on the stack."""
    cached = getattr(stack, "_reference_normalized", None)
    if cached is None:
        cached = [symmetric_normalize(m) for m in stack.matrices]
        stack._reference_normalized = cached
    return cached


def _batch_arrays(batch):
    if isinstance(batch, tuple) and len(batch) == 3:
        users, pos, neg = (np.asarray(a, dtype=np.int64) for a in batch)
    else:
        batch = list(batch)
        users = np.asarray([t.user for t in batch], dtype=np.int64)
        pos = np.asarray([t.pos_item for t in batch], dtype=np.int64)
        neg = np.asarray([t.neg_item for t in batch], dtype=np.int64)
    if users.size == 0:
        raise ValidationError("empty batch")
    return users, pos, neg


def batch_loss(emb: EmbeddingTable, stack: DecoupledStack, batch,
               cfg: TrainConfig, mask_seed: Optional[int] = None) -> LossTerms:
    """Loss terms for one batch along the numpy forward path.

    Shares the noise streams with gradient(), so the two paths evaluate
    the same function; this one never builds a torch graph and is the
    finite-difference reference.
    """
    users, pos, neg = _batch_arrays(batch)
    if mask_seed is None:
        mask_seed = cfg.seed
    n_users = _infer_n_users(emb, stack)
    state = forward(emb, stack, mode=cfg.mode, tau=cfg.tau, seed=mask_seed,
                    hard=cfg.hard_mask, hidden_mode=cfg.hidden_mode)
    x = state.pooled
    y_pos = np.einsum("ij,ij->i", x[users], x[n_users + pos])
    y_neg = np.einsum("ij,ij->i", x[users], x[n_users + neg])
    bpr = bpr_loss(y_pos, y_neg)
    ld = (ld_loss(state.denoised, reference_normalized(stack))
          if state.denoised else 0.0)
    reg = l2_reg(emb)
    return LossTerms(bpr, ld, reg, bpr + cfg.beta * ld + cfg.l2_coeff * reg)


def _infer_n_users(emb, stack) -> int:
    if stack.n_users <= 0:
        raise ValidationError("stack does not record its user count")
    return stack.n_users


def gradient(emb: EmbeddingTable, stack: DecoupledStack, batch,
             cfg: TrainConfig, mask_seed: Optional[int] = None,
             include_ld: bool = True) -> GradientBundle:
    """Exact gradient of the total batch loss with respect to X_0.

    Gumbel noise is fixed per (mask_seed, order) and treated as exogenous,
    so the gradient is the pathwise derivative through the soft mask
    weights, the value-sum normalization, the propagation and the scores.
    """
    from . import _autograd

    cfg.validate()
    users, pos, neg = _batch_arrays(batch)
    if mask_seed is None:
        mask_seed = cfg.seed
    n_users = _infer_n_users(emb, stack)
    ctx = _autograd.TorchContext(stack, n_users)
    grad, (bpr, ld, reg, total) = _autograd.batch_gradient(
        ctx, emb.x0, users, pos, neg, cfg, mask_seed, include_ld)
    terms = LossTerms(bpr, ld, reg, total)
    for name in ("bpr", "ld", "reg", "total"):
        if not np.isfinite(getattr(terms, name)):
            raise NumericError(f"loss term {name} is not finite")
    if not np.all(np.isfinite(grad)):
        raise NumericError("gradient contains non-finite values")
    return GradientBundle(grad.copy(), terms)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape), 0)


def adam_step(emb: EmbeddingTable, grads: np.ndarray, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One bias-corrected Adam update; returns the new table and state."""
    if grads.shape != emb.x0.shape:
        raise ValidationError(f"gradient shape {grads.shape} does not match "
                              f"parameters {emb.x0.shape}")
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    x0 = emb.x0 - lr * m_hat / (np.sqrt(v_hat) + eps)
    return EmbeddingTable(x0), AdamState(m, v, t)


class EpochRunner:
    """Reusable optimization-step driver over one decoupled stack.

    Keeps the torch context, negative-sampler tables and Adam state alive
    across epochs; fit() is built on it and timing benchmarks can drive it
    directly.
    """

    def __init__(self, emb: EmbeddingTable, stack: DecoupledStack,
                 train_set, cfg: TrainConfig):
        from . import _autograd

        cfg.validate()
        self.cfg = cfg
        self.emb = emb
        self.stack = stack
        self.n_users = train_set.n_users
        self.n_items = train_set.n_items
        self.ctx = _autograd.TorchContext(stack, train_set.n_users)
        self.user_sets = data_mod.build_user_item_sets(train_set)
        self.adam = AdamState.zeros(emb.x0.shape)
        self._autograd = _autograd

    def run_epoch(self, positives: np.ndarray, epoch: int) -> LossTerms:
        """Shuffle, batch, sample negatives, step; returns mean loss terms."""
        cfg = self.cfg
        n = positives.shape[0]
        perm = rng_from(cfg.seed, STREAM_SHUFFLE, epoch).permutation(n)
        totals = np.zeros(4)
        for step_no, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[lo:lo + cfg.batch_size]
            users = positives[idx, 0]
            pos = positives[idx, 1]
            neg = data_mod.sample_negative_items(
                self.user_sets, self.n_items, users,
                derive_seed(cfg.seed, STREAM_NEG, epoch, step_no))
            mask_seed = derive_seed(cfg.seed, STREAM_MASK, epoch, step_no)
            grad, terms = self._autograd.batch_gradient(
                self.ctx, self.emb.x0, users, pos, neg, cfg, mask_seed)
            if not np.isfinite(terms[3]) or not np.all(np.isfinite(grad)):
                raise NumericError(
                    f"training loss diverged (non-finite) at epoch {epoch}")
            self.emb, self.adam = adam_step(self.emb, grad, self.adam,
                                            cfg.learning_rate)
            totals += np.asarray(terms) * idx.shape[0]
        mean = totals / n
        return LossTerms(mean[0], mean[1], mean[2], mean[3])


@dataclass
class FitResult:
    embeddings: EmbeddingTable
    meta: dict
    history: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    @property
    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.embeddings, self.meta)

    def log_csv(self) -> str:
        lines = [",".join(LOG_COLUMNS)]
        for row in self.history:
            lines.append(",".join(_format_cell(row[c]) for c in LOG_COLUMNS))
        return "\n".join(lines) + "\n"


def _format_cell(v) -> str:
    if isinstance(v, float):
        return format(v, ".12g")
    return str(v)


def _validation_metric(emb: EmbeddingTable, meta: dict, split, stack) -> float:
    report = eval_mod.evaluate(Checkpoint(emb, meta), split, k=20,
                               phase="validation", stack=stack)
    return report.recall


def fit(split, cfg: TrainConfig, *, cache_dir=None, stack=None,
        on_epoch=None, memory_budget=None) -> FitResult:
    """Train with early stopping on validation Recall@20.

    Keeps the best-validation checkpoint; stops after cfg.patience epochs
    without strict improvement or at cfg.max_epochs. on_epoch, when given,
    receives each history row as it is produced.
    """
    cfg.validate()
    if len(split.train) == 0 or len(split.validation) == 0:
        raise ValidationError("fit needs non-empty train and validation sets")
    graph = build_bipartite(split.train)
    if stack is None:
        budget = {} if memory_budget is None else {"memory_budget": memory_budget}
        stack = load_or_decouple(graph, cfg.order_count, cfg.cap,
                                 binary=cfg.binary_decouple,
                                 cache_dir=cache_dir, **budget)
    emb = init_embeddings(graph.n, cfg.d, cfg.seed)
    meta = {
        "n_users": graph.n_users, "n_items": graph.n_items, "d": cfg.d,
        "order_count": cfg.order_count, "mode": cfg.mode, "tau": cfg.tau,
        "cap": cfg.cap, "binary_decouple": cfg.binary_decouple,
        "hidden_mode": cfg.hidden_mode, "seed": cfg.seed,
        "config_hash": config_hash(cfg),
    }
    runner = EpochRunner(emb, stack, split.train, cfg)
    best = FitResult(emb.copy(), meta)
    best_metric = -np.inf
    stale = 0
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        started = time.perf_counter()
        terms = runner.run_epoch(split.train.pairs, epoch)
        val_recall = _validation_metric(runner.emb, meta, split, stack)
        row = {
            "epoch": epoch, "loss_total": terms.total, "loss_bpr": terms.bpr,
            "loss_ld": terms.ld, "loss_reg": terms.reg,
            "val_recall@20": val_recall,
            "seconds": time.perf_counter() - started,
        }
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if val_recall > best_metric:
            best_metric = val_recall
            best = FitResult(runner.emb.copy(), meta, best_epoch=epoch)
            stale = 0
        else:
            stale += 1
        if stale >= cfg.patience:
            break
    best.history = history
    best.stopped_epoch = history[-1]["epoch"] if history else 0
    return best

"""Full-ranking top-K evaluation: Recall@K, NDCG@K, Precision@K.

Every non-excluded item is scored by inner product; ties break toward the
smaller item index, so rankings (and therefore reports) are bit-for-bit
reproducible. Users without interactions in the evaluated phase are
skipped. The forward pass behind a report always runs with deterministic
(noise-free) masks.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .decouple import load_or_decouple
from .errors import ValidationError
from .graph import build_bipartite
from .model import Checkpoint, forward

_CSV_HEADER = "dataset,mode,seed,k,recall,ndcg,precision"


@dataclass
class EvalReport:
    k: int
    recall: float
    ndcg: float
    precision: float
    n_users_evaluated: int
    phase: str = "test"
    dataset: str = ""
    mode: str = ""
    seed: int = 0
    per_user: Optional[list] = field(default=None, repr=False)

    def csv_row(self) -> str:
        return (f"{self.dataset},{self.mode},{self.seed},{self.k},"
                f"{self.recall!r},{self.ndcg!r},{self.precision!r}")

    def to_json(self) -> str:
        payload = {
            "k": self.k, "recall": self.recall, "ndcg": self.ndcg,
            "precision": self.precision,
            "n_users_evaluated": self.n_users_evaluated,
            "phase": self.phase, "dataset": self.dataset,
            "mode": self.mode, "seed": self.seed,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _topk_by_score(scores: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
    """Top-k candidate indices by descending score, ties to smaller index.

    candidates must be ascending. Uses a partial partition plus an exact
    boundary-tie fixup, so the result equals a full stable sort.
    """
    m = candidates.shape[0]
    if m <= k:
        sel = candidates
    else:
        cand_scores = scores[candidates]
        part = np.argpartition(-cand_scores, k - 1)[:k]
        kth = cand_scores[part].min()
        above = candidates[cand_scores > kth]
        need = k - above.shape[0]
        at = candidates[cand_scores == kth][:need]
        sel = np.concatenate([above, at])
    order = np.argsort(-scores[sel], kind="stable")
    return sel[order][:k]


def rank_topk(x: np.ndarray, n_users: int, user: int, k: int,
              exclude=()) -> np.ndarray:
    """Rank all non-excluded items for one user; returns at most k items."""
    if k < 1:
        raise ValidationError(f"k must be at least 1, got {k}")
    n_items = x.shape[0] - n_users
    if not 0 <= user < n_users:
        raise ValidationError(f"user {user} out of range")
    excluded = np.zeros(n_items, dtype=bool)
    exclude = np.asarray(sorted(exclude), dtype=np.int64)
    if exclude.size:
        if exclude.min() < 0 or exclude.max() >= n_items:
            raise ValidationError("excluded item out of range")
        excluded[exclude] = True
    candidates = np.flatnonzero(~excluded)
    if candidates.size == 0:
        raise ValidationError(f"all items excluded for user {user}")
    scores = x[n_users:] @ x[user]
    order = np.argsort(-scores[candidates], kind="stable")
    return candidates[order][:k]


def metrics_at_k(ranked, relevant, k: int) -> tuple:
    """(recall, ndcg, precision) of one ranking against a relevant set."""
    relevant = set(relevant)
    if not relevant:
        raise ValidationError("relevant set is empty; exclude such users upstream")
    ranked = list(ranked)
    if len(ranked) > k:
        raise ValidationError(f"ranking longer than k={k}")
    hit_positions = [p for p, item in enumerate(ranked, start=1)
                     if item in relevant]
    hits = len(hit_positions)
    recall = hits / len(relevant)
    precision = hits / k
    dcg = sum(1.0 / math.log2(p + 1) for p in hit_positions)
    idcg = sum(1.0 / math.log2(p + 1)
               for p in range(1, min(k, len(relevant)) + 1))
    return recall, dcg / idcg, precision


def _items_by_user(pairs: np.ndarray, n_users: int) -> list:
    out = [[] for _ in range(n_users)]
    for u, i in pairs:
        out[u].append(int(i))
    return out


def evaluate(checkpoint: Checkpoint, split, k: int = 20, phase: str = "test",
             *, stack=None, per_user: bool = False, cache_dir=None,
             memory_budget=None) -> EvalReport:
    """Rank and score every user with interactions in the given phase.

    Exclusions are the user's training items, plus validation items when
    phase is "test". The forward pass is deterministic (no Gumbel noise),
    run once for all users.
    """
    if phase not in ("validation", "test"):
        raise ValidationError(f"unknown phase {phase!r}")
    meta = checkpoint.meta
    train = split.train
    if meta["n_users"] != train.n_users or meta["n_items"] != train.n_items:
        raise ValidationError(
            f"checkpoint is for {meta['n_users']} users x {meta['n_items']} "
            f"items, split has {train.n_users} x {train.n_items}")
    if stack is None:
        graph = build_bipartite(train)
        budget = {} if memory_budget is None else {"memory_budget": memory_budget}
        stack = load_or_decouple(graph, meta["order_count"], meta.get("cap"),
                                 binary=meta.get("binary_decouple", False),
                                 cache_dir=cache_dir, **budget)
    state = forward(checkpoint.embeddings, stack, mode=meta["mode"],
                    tau=meta.get("tau", 0.5), seed=0, deterministic=True,
                    hidden_mode=meta.get("hidden_mode", "sequential"))
    x = state.pooled
    n_users, n_items = train.n_users, train.n_items
    phase_items = _items_by_user(getattr(split, phase).pairs, n_users)
    train_items = _items_by_user(train.pairs, n_users)
    val_items = (_items_by_user(split.validation.pairs, n_users)
                 if phase == "test" else [[] for _ in range(n_users)])
    item_block = x[n_users:]

    eligible = np.asarray([u for u in range(n_users) if phase_items[u]],
                          dtype=np.int64)
    sums = np.zeros(3)
    detail = [] if per_user else None
    for lo in range(0, eligible.shape[0], 256):
        chunk = eligible[lo:lo + 256]
        chunk_scores = x[chunk] @ item_block.T
        for row, user in enumerate(chunk):
            excluded = np.zeros(n_items, dtype=bool)
            excluded[train_items[user]] = True
            excluded[val_items[user]] = True
            candidates = np.flatnonzero(~excluded)
            if candidates.size == 0:
                raise ValidationError(f"all items excluded for user {user}")
            ranked = _topk_by_score(chunk_scores[row], candidates, k)
            rec, ndcg, prec = metrics_at_k(ranked, phase_items[user], k)
            sums += (rec, ndcg, prec)
            if per_user:
                detail.append({"user": int(user), "recall": rec, "ndcg": ndcg,
                               "precision": prec})
    evaluated = int(eligible.shape[0])
    means = sums / evaluated if evaluated else sums
    return EvalReport(k=k, recall=float(means[0]), ndcg=float(means[1]),
                      precision=float(means[2]), n_users_evaluated=evaluated,
                      phase=phase, dataset=meta.get("dataset", ""),
                      mode=meta["mode"], seed=meta.get("seed", 0),
                      per_user=detail)


def write_report(report: EvalReport, base_path) -> None:
    """Write <base>.json and a one-row <base>.csv."""
    base = Path(base_path)
    base.parent.mkdir(parents=True, exist_ok=True)
    base.with_suffix(".json").write_text(report.to_json(), encoding="utf-8")
    base.with_suffix(".csv").write_text(
        _CSV_HEADER + "\n" + report.csv_row() + "\n", encoding="utf-8")

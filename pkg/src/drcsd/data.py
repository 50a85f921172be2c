"""Interaction ingestion, splitting, noise injection and BPR sampling.

On-disk interchange format: UTF-8 text, one interaction per line,
``user_id<TAB>item_id`` (or comma-separated for csv), ``#`` starts a
comment line, extra columns are ignored. All operations taking a seed are
deterministic for that seed.
"""

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import CapacityError, ParseError, SamplingError, ValidationError
from .rng import STREAM_NEG, STREAM_NOISE, STREAM_SPLIT, rng_from

_DELIMS = {"tsv": "\t", "csv": ","}


@dataclass(frozen=True)
class InteractionSet:
    """De-duplicated (user, item) pairs with dense 0-based indices.

    pairs is an (n_pairs, 2) int64 array of [user_index, item_index] rows.
    user_ids / item_ids map dense index -> original identifier; indices
    were assigned in first-appearance order.
    """

    n_users: int
    n_items: int
    pairs: np.ndarray
    user_ids: tuple = ()
    item_ids: tuple = ()

    def __post_init__(self):
        if not self.user_ids:
            object.__setattr__(self, "user_ids",
                               tuple(str(i) for i in range(self.n_users)))
        if not self.item_ids:
            object.__setattr__(self, "item_ids",
                               tuple(str(i) for i in range(self.n_items)))

    @cached_property
    def user_index(self) -> dict:
        return {uid: i for i, uid in enumerate(self.user_ids)}

    @cached_property
    def item_index(self) -> dict:
        return {iid: i for i, iid in enumerate(self.item_ids)}

    @cached_property
    def pair_codes(self) -> np.ndarray:
        """Sorted user*n_items+item codes, for fast membership tests."""
        return np.sort(self.pairs[:, 0] * self.n_items + self.pairs[:, 1])

    def items_of(self, user: int) -> np.ndarray:
        return self.pairs[self.pairs[:, 0] == user, 1]

    def replace_pairs(self, pairs: np.ndarray) -> "InteractionSet":
        return InteractionSet(self.n_users, self.n_items, pairs,
                              self.user_ids, self.item_ids)

    def __len__(self) -> int:
        return self.pairs.shape[0]


@dataclass
class SplitDataset:
    """Train/validation/test partition plus any injected noise pairs."""

    train: InteractionSet
    validation: InteractionSet
    test: InteractionSet
    seed: int
    ratios: tuple = (0.7, 0.1, 0.2)
    noise_ratio: float = 0.0
    noise_pairs: np.ndarray = field(
        default_factory=lambda: np.empty((0, 2), dtype=np.int64))


@dataclass(frozen=True)
class BprTriple:
    user: int
    pos_item: int
    neg_item: int


def load_interactions(path, fmt: str = "tsv") -> InteractionSet:
    """Read an interaction log into an InteractionSet.

    Duplicate (user, item) lines collapse to one pair; dense indices follow
    first appearance. Lines with fewer than two columns raise ParseError
    with the line number; an input with no data lines raises
    ValidationError.
    """
    if fmt not in _DELIMS:
        raise ValidationError(f"unknown format {fmt!r}, expected tsv or csv")
    delim = _DELIMS[fmt]
    path = Path(path)
    user_index: dict = {}
    item_index: dict = {}
    user_ids: list = []
    item_ids: list = []
    seen: set = set()
    rows: list = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            cols = [c.strip() for c in line.split(delim)]
            if len(cols) < 2 or not cols[0] or not cols[1]:
                raise ParseError(f"expected at least two columns, got {line!r}",
                                 path=str(path), line_no=line_no)
            uid, iid = cols[0], cols[1]
            if uid not in user_index:
                user_index[uid] = len(user_ids)
                user_ids.append(uid)
            if iid not in item_index:
                item_index[iid] = len(item_ids)
                item_ids.append(iid)
            key = (user_index[uid], item_index[iid])
            if key not in seen:
                seen.add(key)
                rows.append(key)
    if not rows:
        raise ValidationError(f"no interactions found in {path}")
    pairs = np.asarray(rows, dtype=np.int64)
    return InteractionSet(len(user_ids), len(item_ids), pairs,
                          tuple(user_ids), tuple(item_ids))


def split(data: InteractionSet, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> SplitDataset:
    """Partition pairs uniformly at random into train/validation/test.

    Sizes are floor(ratio * n) per part with the remainder assigned to
    train, so train may exceed its exact share by up to two pairs.
    """
    if len(data) == 0:
        raise ValidationError("cannot split an empty interaction set")
    if len(data) < 10:
        raise ValidationError("need at least 10 interactions to split")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValidationError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(data)
    n_val = int(np.floor(ratios[1] * n))
    n_test = int(np.floor(ratios[2] * n))
    n_train = n - n_val - n_test
    perm = rng_from(seed, STREAM_SPLIT).permutation(n)
    shuffled = data.pairs[perm]
    return SplitDataset(
        train=data.replace_pairs(shuffled[:n_train]),
        validation=data.replace_pairs(shuffled[n_train:n_train + n_val]),
        test=data.replace_pairs(shuffled[n_train + n_val:]),
        seed=seed,
        ratios=tuple(float(r) for r in ratios),
    )


def inject_noise(split_data: SplitDataset, ratio: float, seed: int) -> SplitDataset:
    """Add floor(ratio * |train|) uniformly drawn absent pairs to train.

    The injected pairs are disjoint from every original pair across all
    three parts; validation and test are returned unchanged. Rejection
    sampling aborts with CapacityError after 1000 * count attempts.
    """
    if not 0.0 <= ratio <= 0.5:
        raise ValidationError(f"noise ratio must lie in [0, 0.5], got {ratio}")
    train = split_data.train
    count = int(np.floor(ratio * len(train)))
    if count == 0:
        return SplitDataset(train, split_data.validation, split_data.test,
                            split_data.seed, split_data.ratios, ratio)
    n_users, n_items = train.n_users, train.n_items
    existing = set()
    for part in (train, split_data.validation, split_data.test):
        existing.update((part.pairs[:, 0] * n_items + part.pairs[:, 1]).tolist())
    if n_users * n_items - len(existing) < count:
        raise CapacityError(
            f"only {n_users * n_items - len(existing)} absent pairs exist, need {count}")
    gen = rng_from(seed, STREAM_NOISE)
    drawn: list = []
    drawn_set: set = set()
    max_attempts = 1000 * count
    attempts = 0
    while len(drawn) < count:
        if attempts >= max_attempts:
            raise CapacityError(
                f"could not sample {count} noise pairs within {max_attempts} attempts")
        attempts += 1
        code = int(gen.integers(0, n_users * n_items))
        if code in existing or code in drawn_set:
            continue
        drawn_set.add(code)
        drawn.append(code)
    codes = np.asarray(drawn, dtype=np.int64)
    noise = np.stack([codes // n_items, codes % n_items], axis=1)
    new_train = train.replace_pairs(np.concatenate([train.pairs, noise]))
    return SplitDataset(new_train, split_data.validation, split_data.test,
                        split_data.seed, split_data.ratios, ratio, noise)


def build_user_item_sets(train: InteractionSet) -> list:
    """Per-user sets of interacted item indices."""
    sets: list = [set() for _ in range(train.n_users)]
    for u, i in train.pairs:
        sets[u].add(int(i))
    return sets


def sample_negative_items(user_sets: list, n_items: int, users: np.ndarray,
                          seed: int) -> np.ndarray:
    """One uniformly drawn non-interacted item per user, by rejection."""
    gen = rng_from(seed, STREAM_NEG)
    out = np.empty(len(users), dtype=np.int64)
    for idx, u in enumerate(users):
        pos = user_sets[u]
        if len(pos) >= n_items:
            raise SamplingError(f"user {u} interacted with every item; cannot sample a negative")
        while True:
            cand = int(gen.integers(0, n_items))
            if cand not in pos:
                out[idx] = cand
                break
    return out


def sample_negatives(train: InteractionSet, batch, seed: int) -> list:
    """BPR triples for a batch of (user, pos_item) pairs.

    For each positive, the negative is drawn uniformly from the items the
    user never interacted with in train.
    """
    batch = list(batch)
    user_sets = build_user_item_sets(train)
    users = np.asarray([u for u, _ in batch], dtype=np.int64)
    negs = sample_negative_items(user_sets, train.n_items, users, seed)
    return [BprTriple(int(u), int(p), int(neg))
            for (u, p), neg in zip(batch, negs)]


# ---------------------------------------------------------------------------
# Split persistence: three TSV files plus a JSON manifest.

_PART_FILES = {"train": "train.tsv", "validation": "validation.tsv", "test": "test.tsv"}


def _write_part(part: InteractionSet, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in part.pairs:
            fh.write(f"{part.user_ids[u]}\t{part.item_ids[i]}\n")


def write_split(split_data: SplitDataset, outdir) -> None:
    """Write train/validation/test TSVs and manifest.json into outdir."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for name, fname in _PART_FILES.items():
        _write_part(getattr(split_data, name), outdir / fname)
    train = split_data.train
    manifest = {
        "seed": split_data.seed,
        "ratios": list(split_data.ratios),
        "noise_ratio": split_data.noise_ratio,
        "n_users": train.n_users,
        "n_items": train.n_items,
        "counts": {name: len(getattr(split_data, name)) for name in _PART_FILES},
        "noise_pairs": [[train.user_ids[u], train.item_ids[i]]
                        for u, i in split_data.noise_pairs],
        "user_ids": list(train.user_ids),
        "item_ids": list(train.item_ids),
    }
    with open(outdir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_split(outdir) -> SplitDataset:
    """Reconstruct a SplitDataset written by write_split."""
    outdir = Path(outdir)
    with open(outdir / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    user_ids = tuple(manifest["user_ids"])
    item_ids = tuple(manifest["item_ids"])
    user_index = {uid: i for i, uid in enumerate(user_ids)}
    item_index = {iid: i for i, iid in enumerate(item_ids)}

    def read_part(fname):
        rows = []
        with open(outdir / fname, encoding="utf-8") as fh:
            for line_no, raw in enumerate(fh, 1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                cols = line.split("\t")
                if len(cols) < 2:
                    raise ParseError("expected two columns",
                                     path=str(outdir / fname), line_no=line_no)
                rows.append((user_index[cols[0]], item_index[cols[1]]))
        pairs = np.asarray(rows, dtype=np.int64).reshape(-1, 2)
        return InteractionSet(manifest["n_users"], manifest["n_items"],
                              pairs, user_ids, item_ids)

    noise = np.asarray(
        [[user_index[u], item_index[i]] for u, i in manifest["noise_pairs"]],
        dtype=np.int64).reshape(-1, 2)
    return SplitDataset(
        train=read_part(_PART_FILES["train"]),
        validation=read_part(_PART_FILES["validation"]),
        test=read_part(_PART_FILES["test"]),
        seed=manifest["seed"],
        ratios=tuple(manifest["ratios"]),
        noise_ratio=manifest["noise_ratio"],
        noise_pairs=noise,
    )

"""Interaction loading, implicit-feedback conversion and leave-one-out splits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError

COLUMN_KEYS = ("user", "item", "rating", "timestamp", "skip")


@dataclass(frozen=True)
class Schema:
    """Column layout of a delimiter-separated interaction file.

    ``columns`` names each field in order; use ``"skip"`` for columns that
    should be ignored. ``user`` and ``item`` are mandatory.
    """

    separator: str = "\t"
    columns: tuple[str, ...] = ("user", "item", "rating", "timestamp")
    skip_header: int = 0

    def __post_init__(self):
        unknown = [c for c in self.columns if c not in COLUMN_KEYS]
        if unknown:
            raise ValueError(f"unknown schema column key(s): {unknown}")
        for required in ("user", "item"):
            if required not in self.columns:
                raise ValueError(f"schema must contain a {required!r} column")
        named = [c for c in self.columns if c != "skip"]
        if len(set(named)) != len(named):
            raise ValueError(f"duplicate schema column keys: {self.columns}")
        if self.skip_header < 0:
            raise ValueError("skip_header must be non-negative")


MOVIELENS_100K = Schema()


@dataclass(frozen=True)
class RawInteraction:
    user_key: str
    item_key: str
    rating: Optional[float] = None
    timestamp: Optional[int] = None

    def __post_init__(self):
        if self.rating is not None and not math.isfinite(self.rating):
            raise ValueError(f"rating must be finite, got {self.rating}")
        if self.timestamp is not None and self.timestamp < 0:
            raise ValueError(f"timestamp must be non-negative, got {self.timestamp}")


def load_interactions(path, schema: Schema = MOVIELENS_100K) -> list[RawInteraction]:
    """Read one :class:`RawInteraction` per data line, preserving file order.

    Blank lines are ignored. Raises :class:`DataError` with the 1-based line
    number on a malformed line and ``OSError`` when the file cannot be read.
    """
    col = {name: idx for idx, name in enumerate(schema.columns) if name != "skip"}
    width = len(schema.columns)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if lineno <= schema.skip_header:
                continue
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split(schema.separator)
            if len(fields) != width:
                raise DataError(
                    f"{path}:{lineno}: expected {width} fields, got {len(fields)}"
                )
            try:
                rating = float(fields[col["rating"]]) if "rating" in col else None
                ts = int(float(fields[col["timestamp"]])) if "timestamp" in col else None
                rec = RawInteraction(
                    fields[col["user"]].strip(), fields[col["item"]].strip(), rating, ts
                )
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            records.append(rec)
    return records


@dataclass
class InteractionDataset:
    """Positive implicit interactions over dense user/item ids.

    Interactions are stored column-wise. ``timestamps`` falls back to 0 when
    the source had no timestamp column; recency is then decided by position,
    so ``(timestamp, position)`` is the total recency order used everywhere.
    """

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    user_keys: list[str] = field(default_factory=list)
    item_keys: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        # per-user CSR index, each user's block ordered oldest -> newest
        order = np.lexsort((np.arange(len(self.users)), self.timestamps, self.users))
        self._order = order
        self._ptr = np.concatenate(
            [[0], np.cumsum(np.bincount(self.users, minlength=self.num_users))]
        )

    @property
    def labels(self) -> np.ndarray:
        return np.ones(len(self.users), dtype=np.int8)

    def __len__(self) -> int:
        return len(self.users)

    def user_positions(self, user: int) -> np.ndarray:
        """Row positions of ``user``'s interactions, oldest first."""
        return self._order[self._ptr[user] : self._ptr[user + 1]]

    def user_items(self, user: int) -> np.ndarray:
        return self.items[self.user_positions(user)]

    def user_counts(self) -> np.ndarray:
        return np.diff(self._ptr)

    def to_raw(self) -> list[RawInteraction]:
        """Round-trip back to raw records carrying the original keys."""
        return [
            RawInteraction(self.user_keys[u], self.item_keys[i], 1.0, int(t))
            for u, i, t in zip(self.users, self.items, self.timestamps)
        ]

    def dump_reindex(self, directory) -> None:
        """Write ``users.map`` and ``items.map`` as ``raw_key<TAB>dense_id`` lines."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, keys in (("users.map", self.user_keys), ("items.map", self.item_keys)):
            with open(directory / name, "w", encoding="utf-8") as fh:
                for dense, raw in enumerate(keys):
                    fh.write(f"{raw}\t{dense}\n")


def binarize_and_filter(
    raw: Sequence[RawInteraction], min_interactions: int = 5
) -> InteractionDataset:
    """Turn raw records into a dense positive-only dataset.

    Every observed record is a positive. Duplicate (user, item) pairs keep the
    most recent record, users with fewer than ``min_interactions`` distinct
    items are dropped, and surviving keys get dense ids in order of first
    appearance.
    """
    if min_interactions < 1:
        raise ValueError("min_interactions must be >= 1")

    latest: dict[tuple[str, str], int] = {}
    for pos, rec in enumerate(raw):
        key = (rec.user_key, rec.item_key)
        prev = latest.get(key)
        if prev is None or _ts(rec) >= _ts(raw[prev]):
            latest[key] = pos
    kept = sorted(latest.values())

    counts: dict[str, int] = {}
    for pos in kept:
        counts[raw[pos].user_key] = counts.get(raw[pos].user_key, 0) + 1
    kept = [pos for pos in kept if counts[raw[pos].user_key] >= min_interactions]
    if not kept:
        raise DataError(
            f"no users left with at least {min_interactions} interactions"
        )

    user_ids: dict[str, int] = {}
    item_ids: dict[str, int] = {}
    users, items, stamps = [], [], []
    for pos in kept:
        rec = raw[pos]
        users.append(user_ids.setdefault(rec.user_key, len(user_ids)))
        items.append(item_ids.setdefault(rec.item_key, len(item_ids)))
        stamps.append(_ts(rec))
    return InteractionDataset(
        num_users=len(user_ids),
        num_items=len(item_ids),
        users=np.array(users),
        items=np.array(items),
        timestamps=np.array(stamps),
        user_keys=list(user_ids),
        item_keys=list(item_ids),
    )


def _ts(rec: RawInteraction) -> int:
    return 0 if rec.timestamp is None else rec.timestamp


@dataclass
class LooSplit:
    """Leave-one-out split: one held-out item per user plus fixed eval negatives."""

    train: InteractionDataset
    test_items: np.ndarray
    eval_negatives: np.ndarray

    @property
    def num_users(self) -> int:
        return self.train.num_users

    @property
    def num_items(self) -> int:
        return self.train.num_items

    def candidates(self) -> np.ndarray:
        """(M, 1 + negatives) candidate ids, held-out item in column 0."""
        return np.column_stack([self.test_items, self.eval_negatives])

    def train_items(self, user: int) -> np.ndarray:
        return self.train.user_items(user)


def leave_one_out_split(
    data: InteractionDataset,
    num_eval_negatives: int = 100,
    rng: Optional[np.random.Generator] = None,
) -> LooSplit:
    """Hold out each user's most recent interaction and draw eval negatives."""
    if num_eval_negatives < 1:
        raise ValueError("num_eval_negatives must be >= 1")
    rng = np.random.default_rng(rng)
    counts = data.user_counts()
    if np.any(counts < 2):
        bad = int(np.flatnonzero(counts < 2)[0])
        raise DataError(f"user {bad} has fewer than 2 interactions")

    keep = np.ones(len(data), dtype=bool)
    test_items = np.empty(data.num_users, dtype=np.int64)
    negatives = np.empty((data.num_users, num_eval_negatives), dtype=np.int64)
    for u in range(data.num_users):
        positions = data.user_positions(u)
        last = positions[-1]
        keep[last] = False
        test_items[u] = data.items[last]
        seen = set(data.items[positions].tolist())
        if data.num_items - len(seen) < num_eval_negatives:
            raise DataError(
                f"user {u} has only {data.num_items - len(seen)} uninteracted "
                f"items, {num_eval_negatives} eval negatives requested"
            )
        negatives[u] = _rejection_sample(seen, data.num_items, num_eval_negatives, rng)

    train = InteractionDataset(
        num_users=data.num_users,
        num_items=data.num_items,
        users=data.users[keep],
        items=data.items[keep],
        timestamps=data.timestamps[keep],
        user_keys=data.user_keys,
        item_keys=data.item_keys,
    )
    return LooSplit(train=train, test_items=test_items, eval_negatives=negatives)


def _rejection_sample(exclude: set, n: int, k: int, rng: np.random.Generator) -> list:
    chosen: list[int] = []
    taken = set(exclude)
    while len(chosen) < k:
        for cand in rng.integers(0, n, size=2 * (k - len(chosen))).tolist():
            if cand not in taken:
                taken.add(cand)
                chosen.append(cand)
                if len(chosen) == k:
                    break
    return chosen


def sample_train_negatives(
    user_train_items: Iterable[int],
    num_items: int,
    ratio: int,
    rng: np.random.Generator,
    pool: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Draw ``ratio`` negatives per positive from the user's uninteracted items.

    Sampling is without replacement unless the pool is smaller than the
    request. ``pool`` may be passed to skip recomputing the complement.
    Returns an array of item ids; their label is implicitly 0.
    """
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    positives = np.asarray(
        user_train_items if isinstance(user_train_items, np.ndarray) else sorted(user_train_items),
        dtype=np.int64,
    )
    if pool is None:
        pool = negative_pool(positives, num_items)
    if len(pool) == 0:
        raise DataError("user has interacted with every item; no negatives to sample")
    k = ratio * len(positives)
    return rng.choice(pool, size=k, replace=len(pool) < k)


def negative_pool(positives: np.ndarray, num_items: int) -> np.ndarray:
    mask = np.ones(num_items, dtype=bool)
    mask[positives] = False
    return np.flatnonzero(mask)

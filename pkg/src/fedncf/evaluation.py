"""HR@K and NDCG@K under the leave-one-out protocol."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .dataset import LooSplit


def rank_items(scores, items) -> np.ndarray:
    """Order candidate ids by descending score, ties by ascending item id."""
    scores = np.asarray(scores, dtype=np.float64)
    items = np.asarray(items)
    return items[np.lexsort((items, -scores))]


def _rank_of(ranked, gt) -> int:
    hits = np.flatnonzero(np.asarray(ranked) == gt)
    if len(hits) == 0:
        raise ValueError(f"ground-truth item {gt} is not in the ranked list")
    return int(hits[0]) + 1


def hit_ratio(ranked, gt, k: int = 10) -> int:
    return int(_rank_of(ranked, gt) <= k)


def ndcg(ranked, gt, k: int = 10) -> float:
    rank = _rank_of(ranked, gt)
    return 1.0 / np.log2(rank + 1) if rank <= k else 0.0


def gt_ranks(scores: np.ndarray, candidates: np.ndarray, gt_column: int = 0) -> np.ndarray:
    """1-based rank of the ground truth in each row, with the id tie rule.

    Equivalent to :func:`rank_items` per row, without sorting.
    """
    gt_score = scores[:, gt_column : gt_column + 1]
    gt_item = candidates[:, gt_column : gt_column + 1]
    above = (scores > gt_score) | ((scores == gt_score) & (candidates < gt_item))
    return 1 + above.sum(axis=1)


def metrics_from_ranks(ranks: np.ndarray, k: int = 10) -> tuple[float, float]:
    hits = ranks <= k
    gains = np.where(hits, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(hits.mean()), float(gains.mean())


def evaluate_all(
    scorer: Callable[[np.ndarray, np.ndarray], np.ndarray],
    split: LooSplit,
    k: int = 10,
) -> tuple[float, float]:
    """Mean HR@K and NDCG@K over every user in ``split``.

    ``scorer(users, candidates)`` receives the user id vector and the
    ``(M, C)`` candidate matrix (held-out item in column 0) and must return
    scores of the same shape.
    """
    candidates = split.candidates()
    users = np.arange(split.num_users)
    scores = np.asarray(scorer(users, candidates), dtype=np.float64)
    if scores.shape != candidates.shape:
        raise ValueError(f"scorer returned shape {scores.shape}, expected {candidates.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scorer returned non-finite scores")
    return metrics_from_ranks(gt_ranks(scores, candidates), k)

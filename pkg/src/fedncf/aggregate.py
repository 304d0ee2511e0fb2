"""Plain-text aggregation: SimpleAvg, FedAvg and MF-FedAvg."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .model import GlobalModel


class Strategy(str, Enum):
    SIMPLE_AVG = "simple"
    FED_AVG = "fedavg"
    MF_FED_AVG = "mffedavg"
    MF_SEC_AVG = "mfsecavg"

    @classmethod
    def parse(cls, value) -> "Strategy":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "").replace("_", "")
        aliases = {"simpleavg": "simple", "mfsecagg": "mfsecavg"}
        return cls(aliases.get(key, key))


@dataclass
class LocalUpdate:
    """What a client uploads after local training.

    ``items`` holds full item matrices (rows the client never trained are the
    downloaded global rows). ``touched`` is the 0/1 indicator over items whose
    rows received gradients. ``num_instances`` is the local training-instance
    count (positives plus sampled negatives, per local epoch).
    """

    client_id: int
    items: dict[str, np.ndarray]
    dense: np.ndarray
    touched: np.ndarray
    num_instances: int

    @property
    def num_touched(self) -> int:
        return int(self.touched.sum())

    def weight(self, by: str) -> float:
        if by == "instances":
            return float(self.num_instances)
        if by == "touched":
            return float(self.num_touched)
        raise ValueError(f"unknown weighting {by!r}; use 'instances' or 'touched'")


def _ordered(updates: Sequence[LocalUpdate], prev: GlobalModel) -> list[LocalUpdate]:
    if not updates:
        raise ValueError("no client updates to aggregate")
    dense_size = prev.config.dense_size()
    shapes = {n: m.shape for n, m in prev.item_matrices().items()}
    for up in updates:
        if {n: m.shape for n, m in up.items.items()} != shapes or up.dense.shape != (dense_size,):
            raise ValueError(f"update from client {up.client_id} does not match the model shape")
    # fixed summation order keeps results bit-reproducible
    return sorted(updates, key=lambda u: u.client_id)


def _weighted_dense(updates: list[LocalUpdate], weights: np.ndarray) -> np.ndarray:
    total = weights.sum()
    out = np.zeros_like(updates[0].dense)
    for up, w in zip(updates, weights):
        out += (w / total) * up.dense
    return out


def simple_avg(updates: Sequence[LocalUpdate], prev: GlobalModel) -> GlobalModel:
    """Unweighted mean of every parameter over the clients."""
    updates = _ordered(updates, prev)
    k = len(updates)
    items = {n: sum(up.items[n] for up in updates) / k for n in prev.item_matrices()}
    dense = sum(up.dense for up in updates) / k
    return prev.replace(items, dense)


def fed_avg(updates: Sequence[LocalUpdate], prev: GlobalModel, weight_by: str = "instances") -> GlobalModel:
    """FedAvg: every parameter is the ``n_i / n`` weighted mean of client values."""
    updates = _ordered(updates, prev)
    weights = np.array([up.weight(weight_by) for up in updates])
    if weights.sum() <= 0:
        raise ValueError("FedAvg needs at least one client with a positive instance count")
    total = weights.sum()
    items = {}
    for name in prev.item_matrices():
        acc = np.zeros_like(prev.item_matrices()[name])
        for up, w in zip(updates, weights):
            acc += (w / total) * up.items[name]
        items[name] = acc
    return prev.replace(items, _weighted_dense(updates, weights))


def mf_fed_avg(updates: Sequence[LocalUpdate], prev: GlobalModel, weight_by: str = "touched") -> GlobalModel:
    """Per-item mean over the clients that touched each item, FedAvg on dense weights.

    Rows no client touched are carried over from ``prev``.
    """
    updates = _ordered(updates, prev)
    counts = np.zeros(prev.config.num_items)
    for up in updates:
        counts += up.touched
    seen = counts > 0
    items = {}
    for name, old in prev.item_matrices().items():
        acc = np.zeros_like(old)
        for up in updates:
            acc += up.touched[:, None] * up.items[name]
        new = old.copy()
        new[seen] = acc[seen] / counts[seen, None]
        items[name] = new
    weights = np.array([up.weight(weight_by) for up in updates])
    dense = _weighted_dense(updates, weights) if weights.sum() > 0 else prev.flat_dense()
    return prev.replace(items, dense)


def aggregate_plain(strategy, updates: Sequence[LocalUpdate], prev: GlobalModel) -> GlobalModel:
    strategy = Strategy.parse(strategy)
    if strategy is Strategy.SIMPLE_AVG:
        return simple_avg(updates, prev)
    if strategy is Strategy.FED_AVG:
        return fed_avg(updates, prev)
    if strategy is Strategy.MF_FED_AVG:
        return mf_fed_avg(updates, prev)
    raise ValueError(f"{strategy.value} is not a plain aggregation strategy")

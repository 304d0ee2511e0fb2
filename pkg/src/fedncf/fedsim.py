"""Federated training simulation and the centralized baseline.

Randomness is keyed rather than sequential: every stream is
``default_rng([master_seed, tag, ...])``, so a client's negatives and batch
order depend only on (seed, round, user) and not on the order in which
clients happen to run.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .aggregate import LocalUpdate, Strategy, aggregate_plain
from .dataset import InteractionDataset, LooSplit, negative_pool, sample_train_negatives
from .evaluation import evaluate_all
from .model import (
    AdamState,
    GlobalModel,
    ModelConfig,
    UserVector,
    _scatter_rows,
    adam_step,
    backward,
    forward,
    init_model,
    init_user,
)
from .secagg import (
    FixedPointCodec,
    count_masked_parameters,
    encode_update,
    exchange_seeds,
    mask_update,
    secure_aggregate,
    seeds_for,
)

log = logging.getLogger(__name__)

BYTES_PER_PARAM = 8

# stream tags for keyed generators
_MODEL, _USERS, _SELECT, _LOCAL, _SEEDS, _EPOCH = range(6)


def keyed_rng(master_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([int(master_seed), *map(int, key)])


@dataclass
class TrainingPlan:
    batch_size: int = 256
    local_epochs: int = 2
    learning_rate: float = 1e-3
    negatives_per_positive: int = 4
    clients_per_round: int = 20
    aggregation: Strategy = Strategy.MF_FED_AVG
    total_global_rounds: int = 400
    master_seed: int = 0
    scale_bits: int = 16
    workers: int = 1

    def __post_init__(self):
        self.aggregation = Strategy.parse(self.aggregation)
        for name in ("batch_size", "negatives_per_positive", "clients_per_round", "workers", "scale_bits"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.local_epochs < 0 or self.total_global_rounds < 0:
            raise ValueError("local_epochs and total_global_rounds must be non-negative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class ClientState:
    user_id: int
    user: UserVector
    train_items: np.ndarray
    pool: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        self.train_items = np.asarray(self.train_items, dtype=np.int64)
        if self.pool is None:
            raise ValueError("ClientState needs its negative pool")


@dataclass
class ClientTiming:
    global_round: int
    aggregation_round: int
    client_id: int
    local_seconds: float
    mask_seconds: float = 0.0


@dataclass
class RoundRecord:
    """Metrics snapshot after ``global_round`` global rounds (or epochs)."""

    global_round: int
    aggregation_rounds: int
    strategy: str
    hr: float
    ndcg: float
    transmitted_params: int = 0
    mask_params: int = 0
    timings: list[ClientTiming] = field(default_factory=list, repr=False)

    @property
    def transmitted_bytes(self) -> int:
        return self.transmitted_params * BYTES_PER_PARAM


def make_clients(train: InteractionDataset, config: ModelConfig, master_seed: int) -> list[ClientState]:
    clients = []
    for u in range(train.num_users):
        items = np.unique(train.user_items(u))
        clients.append(
            ClientState(
                user_id=u,
                user=init_user(config, keyed_rng(master_seed, _USERS, u)),
                train_items=items,
                pool=negative_pool(items, train.num_items),
            )
        )
    return clients


def select_clients(all_ids: Sequence[int], c: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Partition one global round into aggregation rounds of ``c`` clients.

    Clients are drawn without replacement; the last group may be smaller.
    Each group is returned in ascending id order.
    """
    ids = np.asarray(all_ids, dtype=np.int64)
    if not 1 <= c <= len(ids):
        raise ValueError(f"clients per round must be in [1, {len(ids)}], got {c}")
    perm = rng.permutation(ids)
    return [np.sort(perm[s : s + c]) for s in range(0, len(perm), c)]


def local_update(
    global_model: GlobalModel,
    client: ClientState,
    plan: TrainingPlan,
    rng: np.random.Generator,
) -> LocalUpdate:
    """Train on the client's data starting from ``global_model``.

    The client's user vector is updated in place; everything returned is
    safe to transmit. Adam state starts fresh on every call.
    """
    if len(client.train_items) == 0:
        raise ValueError(f"client {client.user_id} has no training items")
    model = global_model.copy()
    user = client.user.copy()
    params = {**model.parameters(), **user.parameters()}
    state = AdamState()
    n_items = model.config.num_items
    touched = np.zeros(n_items, dtype=np.int8)
    positives = client.train_items
    instances = 0
    for _ in range(plan.local_epochs):
        negatives = sample_train_negatives(
            positives, n_items, plan.negatives_per_positive, rng, pool=client.pool
        )
        items = np.concatenate([positives, negatives])
        labels = np.concatenate([np.ones(len(positives)), np.zeros(len(negatives))])
        order = rng.permutation(len(items))
        items, labels = items[order], labels[order]
        touched[items] = 1
        instances = len(items)
        for s in range(0, len(items), plan.batch_size):
            bi, bl = items[s : s + plan.batch_size], labels[s : s + plan.batch_size]
            _, cache = forward(model, user, bi)
            grads = backward(model, user, bi, bl, cache)
            adam_step(state, params, grads.as_param_grads(), plan.learning_rate)
    client.user = user
    return LocalUpdate(
        client_id=client.user_id,
        items={n: m for n, m in model.item_matrices().items()},
        dense=model.flat_dense(),
        touched=touched,
        num_instances=instances,
    )


def transmitted_per_client(config: ModelConfig, strategy: Strategy) -> int:
    """Parameters one client uploads per aggregation round."""
    count = config.num_items * config.latent_dim * len(config.item_matrix_names()) + config.dense_size()
    if strategy in (Strategy.MF_FED_AVG, Strategy.MF_SEC_AVG):
        count += config.num_items
    elif strategy is Strategy.FED_AVG:
        count += 1
    return count


@dataclass
class RoundStats:
    transmitted_params: int
    mask_params: int
    timings: list[ClientTiming]


def run_aggregation_round(
    model: GlobalModel,
    clients: Sequence[ClientState],
    plan: TrainingPlan,
    global_round: int = 0,
    aggregation_round: int = 0,
) -> tuple[GlobalModel, RoundStats]:
    """One select-train-(mask)-aggregate cycle over ``clients``."""
    if not clients:
        raise ValueError("no clients selected")
    clients = sorted(clients, key=lambda c: c.user_id)

    def train_one(client):
        start = time.perf_counter()
        rng = keyed_rng(plan.master_seed, _LOCAL, global_round, client.user_id)
        update = local_update(model, client, plan, rng)
        return update, time.perf_counter() - start

    if plan.workers > 1 and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=plan.workers) as pool:
            results = list(pool.map(train_one, clients))
    else:
        results = [train_one(c) for c in clients]
    updates = [u for u, _ in results]
    timings = [
        ClientTiming(global_round, aggregation_round, c.user_id, secs)
        for c, (_, secs) in zip(clients, results)
    ]

    cfg = model.config
    strategy = plan.aggregation
    mask_params = 0
    if strategy is Strategy.MF_SEC_AVG:
        codec = FixedPointCodec(plan.scale_bits)
        ids = [c.user_id for c in clients]
        seeds = exchange_seeds(ids, keyed_rng(plan.master_seed, _SEEDS, global_round, aggregation_round))
        masked = []
        for up, timing in zip(updates, timings):
            start = time.perf_counter()
            masked.append(mask_update(encode_update(up, codec), up.client_id, seeds_for(up.client_id, seeds)))
            timing.mask_seconds = time.perf_counter() - start
        new_model = secure_aggregate(masked, model, codec, expected=ids)
        mask_params = len(clients) * count_masked_parameters(cfg, len(clients))
    else:
        new_model = aggregate_plain(strategy, updates, model)
    stats = RoundStats(len(clients) * transmitted_per_client(cfg, strategy), mask_params, timings)
    return new_model, stats


def score_candidates(model: GlobalModel, users: UserVector, candidates: np.ndarray) -> np.ndarray:
    """Scores for an ``(M, C)`` candidate matrix, row ``m`` scored with ``users`` row ``m``."""
    m, c = candidates.shape
    per_row = users.rows(np.repeat(np.arange(m), c))
    pred, _ = forward(model, per_row, candidates.ravel())
    return pred.reshape(m, c)


class FederatedTrainer:
    """Stateful federated simulation over one training set."""

    def __init__(self, train: InteractionDataset, config: ModelConfig, plan: TrainingPlan):
        if plan.clients_per_round > train.num_users:
            raise ValueError(
                f"clients_per_round={plan.clients_per_round} exceeds the {train.num_users} users"
            )
        self.config = config
        self.plan = plan
        self.clients = make_clients(train, config, plan.master_seed)
        self.model = init_model(config, keyed_rng(plan.master_seed, _MODEL))
        self.global_round = 0
        self.aggregation_rounds = 0

    def user_matrix(self) -> UserVector:
        stack = lambda name: np.stack([getattr(c.user, name) for c in self.clients])
        return UserVector(
            stack("gmf") if self.config.has_gmf else None,
            stack("mlp") if self.config.has_mlp else None,
        )

    def scorer(self) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
        users = self.user_matrix()
        return lambda ids, cands: score_candidates(self.model, users.rows(ids), cands)

    def run_global_round(self) -> RoundStats:
        rng = keyed_rng(self.plan.master_seed, _SELECT, self.global_round)
        groups = select_clients([c.user_id for c in self.clients], self.plan.clients_per_round, rng)
        total = RoundStats(0, 0, [])
        for a, group in enumerate(groups):
            selected = [self.clients[i] for i in group]
            self.model, stats = run_aggregation_round(
                self.model, selected, self.plan, self.global_round, a
            )
            self.aggregation_rounds += 1
            total.transmitted_params += stats.transmitted_params
            total.mask_params += stats.mask_params
            total.timings += stats.timings
        self.global_round += 1
        return total

    def run(
        self,
        split: Optional[LooSplit] = None,
        eval_every: int = 5,
        k: int = 10,
        rounds: Optional[int] = None,
    ) -> list[RoundRecord]:
        rounds = self.plan.total_global_rounds if rounds is None else rounds
        if eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        records = []
        pending = RoundStats(0, 0, [])

        def snapshot():
            hr, nd = evaluate_all(self.scorer(), split, k) if split is not None else (float("nan"),) * 2
            records.append(
                RoundRecord(
                    self.global_round,
                    self.aggregation_rounds,
                    self.plan.aggregation.value,
                    hr,
                    nd,
                    pending.transmitted_params,
                    pending.mask_params,
                    list(pending.timings),
                )
            )

        snapshot()
        for r in range(1, rounds + 1):
            stats = self.run_global_round()
            pending.transmitted_params += stats.transmitted_params
            pending.mask_params += stats.mask_params
            pending.timings += stats.timings
            self._check_finite()
            if r % eval_every == 0 or r == rounds:
                snapshot()
                log.info(
                    "global round %d (%s): HR@%d=%.4f NDCG@%d=%.4f",
                    self.global_round, self.plan.aggregation.value, k, records[-1].hr, k, records[-1].ndcg,
                )
                pending = RoundStats(0, 0, [])
        return records

    def _check_finite(self):
        for name, arr in self.model.parameters().items():
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"parameter {name} became non-finite")


def train_federated(
    data: LooSplit, config: ModelConfig, plan: TrainingPlan, eval_every: int = 5
) -> list[RoundRecord]:
    """Run ``plan.total_global_rounds`` global rounds, evaluating every ``eval_every``."""
    return FederatedTrainer(data.train, config, plan).run(data, eval_every)


class CentralizedTrainer:
    """Plain NCF training with a server-side user embedding matrix."""

    def __init__(
        self,
        train: InteractionDataset,
        config: ModelConfig,
        batch_size: int = 256,
        learning_rate: float = 1e-3,
        negatives_per_positive: int = 4,
        seed: int = 0,
    ):
        self.config = config
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.ratio = negatives_per_positive
        self.seed = seed
        self.model = init_model(config, keyed_rng(seed, _MODEL))
        self.users = init_user(config, keyed_rng(seed, _USERS), count=train.num_users)
        self.positives = [np.unique(train.user_items(u)) for u in range(train.num_users)]
        self.pools = [negative_pool(p, train.num_items) for p in self.positives]
        self.state = AdamState()
        self.epoch = 0

    def scorer(self):
        return lambda ids, cands: score_candidates(self.model, self.users.rows(ids), cands)

    def _epoch_instances(self, rng):
        users, items, labels = [], [], []
        for u, (pos, pool) in enumerate(zip(self.positives, self.pools)):
            neg = sample_train_negatives(pos, self.config.num_items, self.ratio, rng, pool=pool)
            users.append(np.full(len(pos) + len(neg), u))
            items += [pos, neg]
            labels += [np.ones(len(pos)), np.zeros(len(neg))]
        users = np.concatenate(users)
        items = np.concatenate(items)
        labels = np.concatenate(labels)
        order = rng.permutation(len(users))
        return users[order], items[order], labels[order]

    def run_epoch(self):
        rng = keyed_rng(self.seed, _EPOCH, self.epoch)
        users, items, labels = self._epoch_instances(rng)
        params = {**self.model.parameters(), **self.users.parameters()}
        for s in range(0, len(users), self.batch_size):
            bu = users[s : s + self.batch_size]
            bi = items[s : s + self.batch_size]
            bl = labels[s : s + self.batch_size]
            batch_users = self.users.rows(bu)
            _, cache = forward(self.model, batch_users, bi)
            grads = backward(self.model, batch_users, bi, bl, cache)
            flat = {**grads.dense, **grads.items}
            for name, g in grads.user.items():
                flat[name] = _scatter_rows(bu, g)
            adam_step(self.state, params, flat, self.learning_rate)
        self.epoch += 1


def train_centralized(
    data: LooSplit,
    config: ModelConfig,
    epochs: int = 100,
    batch_size: int = 256,
    learning_rate: float = 1e-3,
    negatives_per_positive: int = 4,
    seed: int = 0,
    eval_every: int = 1,
    k: int = 10,
) -> list[RoundRecord]:
    trainer = CentralizedTrainer(data.train, config, batch_size, learning_rate, negatives_per_positive, seed)
    records = []

    def snapshot():
        hr, nd = evaluate_all(trainer.scorer(), data, k)
        records.append(RoundRecord(trainer.epoch, trainer.epoch, "centralized", hr, nd))

    snapshot()
    for e in range(1, epochs + 1):
        start = time.perf_counter()
        trainer.run_epoch()
        if e % eval_every == 0 or e == epochs:
            snapshot()
            records[-1].timings = [ClientTiming(e, e, -1, time.perf_counter() - start)]
            log.info("epoch %d: HR@%d=%.4f NDCG@%d=%.4f", e, k, records[-1].hr, k, records[-1].ndcg)
    return records

"""scikit-learn style wrappers around the centralized and federated trainers.

``X`` is always an integer array of ``(user, item)`` pairs with dense,
zero-based ids. ``fit`` treats the pairs as implicit positives; ``predict``
returns interaction probabilities for arbitrary pairs.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .dataset import InteractionDataset
from .fedsim import CentralizedTrainer, FederatedTrainer, TrainingPlan
from .model import ModelConfig, forward


def check_pairs(X, name="X") -> np.ndarray:
    """Validate a ``(n, 2)`` array of non-negative integer ids."""
    X = check_array(X, dtype=None, ensure_2d=True, input_name=name)
    if not np.issubdtype(X.dtype, np.integer):
        if not np.issubdtype(X.dtype, np.number) or np.any(X != np.round(X)):
            raise ValueError(f"{name} must hold integer ids")
    X = X.astype(np.int64)
    if X.shape[1] != 2:
        raise ValueError(f"{name} must have two columns (user, item), got {X.shape[1]}")
    if X.min() < 0:
        raise ValueError(f"{name} contains negative ids")
    return X


def _positives(X, y):
    X = check_pairs(X)
    if y is not None:
        y = np.asarray(y).ravel()
        if len(y) != len(X):
            raise ValueError(f"y has {len(y)} entries for {len(X)} pairs")
        X = X[y > 0]
    # one row per distinct pair
    return np.unique(X, axis=0)


class NCFRecommender(BaseEstimator):
    """Centralized GMF / MLP / NeuMF trained with BCE and sampled negatives."""

    def __init__(
        self,
        model="gmf",
        latent_dim=12,
        hidden_layers=(48, 24, 12, 6),
        epochs=20,
        batch_size=256,
        learning_rate=1e-3,
        negatives=4,
        num_users=None,
        num_items=None,
        random_state=0,
    ):
        self.model = model
        self.latent_dim = latent_dim
        self.hidden_layers = hidden_layers
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.negatives = negatives
        self.num_users = num_users
        self.num_items = num_items
        self.random_state = random_state

    def _build(self, X, y):
        pairs = _positives(X, y)
        if len(pairs) == 0:
            raise ValueError("no positive interactions to fit")
        n_users = self.num_users or int(pairs[:, 0].max()) + 1
        n_items = self.num_items or int(pairs[:, 1].max()) + 1
        if pairs[:, 0].max() >= n_users or pairs[:, 1].max() >= n_items:
            raise ValueError("ids exceed num_users / num_items")
        train = InteractionDataset(n_users, n_items, pairs[:, 0], pairs[:, 1], np.zeros(len(pairs), np.int64))
        hidden = None if self.model == "gmf" else tuple(self.hidden_layers)
        self.config_ = ModelConfig(self.model, self.latent_dim, hidden, n_items)
        self.n_users_, self.n_items_ = n_users, n_items
        return train

    def fit(self, X, y=None):
        train = self._build(X, y)
        trainer = CentralizedTrainer(
            train, self.config_, self.batch_size, self.learning_rate, self.negatives, self.random_state
        )
        for _ in range(self.epochs):
            trainer.run_epoch()
        self.model_, self.users_ = trainer.model, trainer.users
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_pairs(X)
        if X[:, 0].max() >= self.n_users_ or X[:, 1].max() >= self.n_items_:
            raise ValueError("X refers to users or items unknown to the fitted model")
        pred, _ = forward(self.model_, self.users_.rows(X[:, 0]), X[:, 1])
        return pred

    def recommend(self, user: int, k: int = 10, exclude=()) -> np.ndarray:
        """Top-``k`` item ids for ``user``; ties go to the smaller id."""
        check_is_fitted(self, "model_")
        items = np.arange(self.n_items_)
        scores = self.predict(np.column_stack([np.full(self.n_items_, user), items]))
        keep = ~np.isin(items, np.asarray(exclude, dtype=np.int64))
        items, scores = items[keep], scores[keep]
        return items[np.lexsort((items, -scores))][:k]


class FederatedNCFRecommender(NCFRecommender):
    """The same models trained by federated simulation; one client per user."""

    def __init__(
        self,
        model="gmf",
        latent_dim=12,
        hidden_layers=(48, 24, 12, 6),
        rounds=20,
        strategy="mffedavg",
        clients_per_round=20,
        local_epochs=2,
        batch_size=256,
        learning_rate=1e-3,
        negatives=4,
        workers=1,
        num_users=None,
        num_items=None,
        random_state=0,
    ):
        self.model = model
        self.latent_dim = latent_dim
        self.hidden_layers = hidden_layers
        self.rounds = rounds
        self.strategy = strategy
        self.clients_per_round = clients_per_round
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.negatives = negatives
        self.workers = workers
        self.num_users = num_users
        self.num_items = num_items
        self.random_state = random_state

    def fit(self, X, y=None):
        train = self._build(X, y)
        if np.any(train.user_counts() == 0):
            raise ValueError("every user id below num_users needs at least one interaction")
        plan = TrainingPlan(
            batch_size=self.batch_size,
            local_epochs=self.local_epochs,
            learning_rate=self.learning_rate,
            negatives_per_positive=self.negatives,
            clients_per_round=min(self.clients_per_round, train.num_users),
            aggregation=self.strategy,
            total_global_rounds=self.rounds,
            master_seed=self.random_state,
            workers=self.workers,
        )
        trainer = FederatedTrainer(train, self.config_, plan)
        trainer.run(rounds=self.rounds, eval_every=max(self.rounds, 1))
        self.model_, self.users_ = trainer.model, trainer.user_matrix()
        return self

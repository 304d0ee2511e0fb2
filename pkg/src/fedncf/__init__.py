"""Federated neural collaborative filtering with secure per-item aggregation."""

from .aggregate import LocalUpdate, Strategy, aggregate_plain, fed_avg, mf_fed_avg, simple_avg
from .dataset import (
    InteractionDataset,
    LooSplit,
    RawInteraction,
    Schema,
    binarize_and_filter,
    leave_one_out_split,
    load_interactions,
    sample_train_negatives,
)
from .errors import ConfigError, DataError, DropoutError, FedNCFError
from .evaluation import evaluate_all, hit_ratio, ndcg, rank_items
from .fedsim import (
    CentralizedTrainer,
    FederatedTrainer,
    RoundRecord,
    TrainingPlan,
    local_update,
    run_aggregation_round,
    select_clients,
    train_centralized,
    train_federated,
)
from .model import GlobalModel, ModelConfig, UserVector, backward, forward, init_model, init_user
from .secagg import (
    FixedPointCodec,
    count_masked_parameters,
    derive_masks,
    encode_update,
    exchange_seeds,
    mask_update,
    secure_aggregate,
    splitmix64,
)

__version__ = "0.1.0"

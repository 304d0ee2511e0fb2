"""GMF, MLP and NeuMF scoring models with hand-written gradients.

Everything is float64 numpy. A model is split into the shared part
(:class:`GlobalModel`: item embeddings and dense layers) and the private part
(:class:`UserVector`), because only the former is ever sent to a server.

Parameter names used by the optimizer and the serializer:

``item_gmf``, ``item_mlp``
    item embedding matrices, updated row-sparsely
``tower.{k}.weight``, ``tower.{k}.bias``
    hidden MLP layers
``output.weight``, ``output.bias``
    prediction layer
``user_gmf``, ``user_mlp``
    user vectors (or user matrices in the centralized trainer)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

KINDS = ("gmf", "mlp", "neumf")
DEFAULT_HIDDEN = (48, 24, 12, 6)
PRED_CLAMP = 1e-7


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "gmf"
    latent_dim: int = 12
    hidden_layers: Optional[tuple[int, ...]] = None
    num_items: int = 1

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ValueError(f"model kind must be one of {KINDS}, got {self.kind!r}")
        if self.hidden_layers is None:
            hidden = () if kind == "gmf" else DEFAULT_HIDDEN
        else:
            hidden = tuple(int(h) for h in self.hidden_layers)
        object.__setattr__(self, "hidden_layers", hidden)
        if kind == "gmf" and hidden:
            raise ValueError("GMF takes no hidden layers")
        if kind != "gmf" and not hidden:
            raise ValueError(f"{kind} needs at least one hidden layer")
        if self.latent_dim < 1 or self.num_items < 1 or any(h < 1 for h in hidden):
            raise ValueError("latent_dim, num_items and hidden sizes must be positive")

    @property
    def has_gmf(self) -> bool:
        return self.kind in ("gmf", "neumf")

    @property
    def has_mlp(self) -> bool:
        return self.kind in ("mlp", "neumf")

    @property
    def output_in(self) -> int:
        width = 0
        if self.has_gmf:
            width += self.latent_dim
        if self.has_mlp:
            width += self.hidden_layers[-1]
        return width

    def item_matrix_names(self) -> list[str]:
        return [n for n, on in (("item_gmf", self.has_gmf), ("item_mlp", self.has_mlp)) if on]

    def user_vector_names(self) -> list[str]:
        return [n for n, on in (("user_gmf", self.has_gmf), ("user_mlp", self.has_mlp)) if on]

    def dense_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        fan_in = 2 * self.latent_dim
        for k, h in enumerate(self.hidden_layers):
            shapes += [(f"tower.{k}.weight", (h, fan_in)), (f"tower.{k}.bias", (h,))]
            fan_in = h
        shapes += [("output.weight", (1, self.output_in)), ("output.bias", (1,))]
        return shapes

    def dense_size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.dense_shapes())


@dataclass
class DenseLayer:
    weights: np.ndarray
    biases: np.ndarray

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.biases.copy())


@dataclass
class GlobalModel:
    config: ModelConfig
    item_gmf: Optional[np.ndarray]
    item_mlp: Optional[np.ndarray]
    tower: list[DenseLayer]
    output: DenseLayer

    def parameters(self) -> dict[str, np.ndarray]:
        """Live references to every array, keyed by parameter name."""
        params = {}
        if self.item_gmf is not None:
            params["item_gmf"] = self.item_gmf
        if self.item_mlp is not None:
            params["item_mlp"] = self.item_mlp
        params.update(self.dense_parameters())
        return params

    def dense_parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for k, layer in enumerate(self.tower):
            params[f"tower.{k}.weight"] = layer.weights
            params[f"tower.{k}.bias"] = layer.biases
        params["output.weight"] = self.output.weights
        params["output.bias"] = self.output.biases
        return params

    def item_matrices(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in self.config.item_matrix_names()}

    def flat_dense(self) -> np.ndarray:
        """All dense weights and biases concatenated in canonical order."""
        return np.concatenate([p.ravel() for p in self.dense_parameters().values()])

    def replace(self, items: Optional[dict] = None, dense: Optional[np.ndarray] = None) -> "GlobalModel":
        """New model with the given item matrices and/or flat dense vector; arrays are copied."""
        new = self.copy()
        for name, mat in (items or {}).items():
            setattr(new, name, np.array(mat, dtype=np.float64))
        if dense is not None:
            dense = np.asarray(dense, dtype=np.float64)
            if dense.size != self.config.dense_size():
                raise ValueError(
                    f"dense vector has {dense.size} entries, expected {self.config.dense_size()}"
                )
            offset = 0
            for arr in new.dense_parameters().values():
                arr[...] = dense[offset : offset + arr.size].reshape(arr.shape)
                offset += arr.size
        return new

    def copy(self) -> "GlobalModel":
        return GlobalModel(
            self.config,
            None if self.item_gmf is None else self.item_gmf.copy(),
            None if self.item_mlp is None else self.item_mlp.copy(),
            [layer.copy() for layer in self.tower],
            self.output.copy(),
        )


@dataclass
class UserVector:
    """Private user embedding(s); 1-D for one user, 2-D for a batch of users."""

    gmf: Optional[np.ndarray] = None
    mlp: Optional[np.ndarray] = None

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        if self.gmf is not None:
            params["user_gmf"] = self.gmf
        if self.mlp is not None:
            params["user_mlp"] = self.mlp
        return params

    def copy(self) -> "UserVector":
        return UserVector(
            None if self.gmf is None else self.gmf.copy(),
            None if self.mlp is None else self.mlp.copy(),
        )

    def rows(self, index) -> "UserVector":
        return UserVector(
            None if self.gmf is None else self.gmf[index],
            None if self.mlp is None else self.mlp[index],
        )


def init_user(config: ModelConfig, rng: np.random.Generator, count: Optional[int] = None) -> UserVector:
    """Draw user embedding(s) from normal(0, 0.01)."""
    shape = (config.latent_dim,) if count is None else (count, config.latent_dim)
    return UserVector(
        rng.normal(0.0, 0.01, shape) if config.has_gmf else None,
        rng.normal(0.0, 0.01, shape) if config.has_mlp else None,
    )


def xavier_uniform(fan_out: int, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def init_model(config: ModelConfig, rng: np.random.Generator) -> GlobalModel:
    """Xavier-uniform dense weights, zero biases, normal(0, 0.01) item embeddings."""
    rng = np.random.default_rng(rng)
    shape = (config.num_items, config.latent_dim)
    item_gmf = rng.normal(0.0, 0.01, shape) if config.has_gmf else None
    item_mlp = rng.normal(0.0, 0.01, shape) if config.has_mlp else None
    tower = []
    fan_in = 2 * config.latent_dim
    for h in config.hidden_layers:
        tower.append(DenseLayer(xavier_uniform(h, fan_in, rng), np.zeros(h)))
        fan_in = h
    output = DenseLayer(xavier_uniform(1, config.output_in, rng), np.zeros(1))
    return GlobalModel(config, item_gmf, item_mlp, tower, output)


@dataclass
class ForwardCache:
    items: np.ndarray
    user_gmf: Optional[np.ndarray] = None
    item_gmf: Optional[np.ndarray] = None
    activations: list = field(default_factory=list)
    pre_activations: list = field(default_factory=list)
    features: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None
    predictions: Optional[np.ndarray] = None


def _check_items(model: GlobalModel, items) -> np.ndarray:
    items = np.atleast_1d(np.asarray(items, dtype=np.int64))
    if items.size and (items.min() < 0 or items.max() >= model.config.num_items):
        raise IndexError(f"item id out of range [0, {model.config.num_items})")
    return items


def _per_row(vec: np.ndarray, n: int) -> np.ndarray:
    return np.broadcast_to(vec, (n, vec.shape[-1])) if vec.ndim == 1 else vec


def forward(model: GlobalModel, user: UserVector, items) -> tuple[np.ndarray, ForwardCache]:
    """Score ``items`` for ``user``; returns probabilities and the backward cache.

    ``user`` holds either one vector per branch (shared by all items) or one
    row per item.
    """
    cfg = model.config
    items = _check_items(model, items)
    n = len(items)
    cache = ForwardCache(items=items)
    parts = []
    if cfg.has_gmf:
        cache.user_gmf = _per_row(user.gmf, n)
        cache.item_gmf = model.item_gmf[items]
        parts.append(cache.user_gmf * cache.item_gmf)
    if cfg.has_mlp:
        x = np.concatenate([_per_row(user.mlp, n), model.item_mlp[items]], axis=1)
        cache.activations.append(x)
        for layer in model.tower:
            z = x @ layer.weights.T + layer.biases
            x = np.maximum(z, 0.0)
            cache.pre_activations.append(z)
            cache.activations.append(x)
        parts.append(x)
    h = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)
    cache.features = h
    cache.logits = h @ model.output.weights[0] + model.output.biases[0]
    cache.predictions = expit(cache.logits)
    return cache.predictions, cache


def bce_loss(pred, label):
    """Binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(pred, dtype=np.float64), PRED_CLAMP, 1.0 - PRED_CLAMP)
    r = np.asarray(label, dtype=np.float64)
    loss = -(r * np.log(p) + (1.0 - r) * np.log1p(-p))
    return float(loss) if loss.ndim == 0 else loss


def batch_loss(model: GlobalModel, user: UserVector, items, labels) -> float:
    pred, _ = forward(model, user, items)
    return float(np.mean(bce_loss(pred, labels)))


@dataclass
class Gradients:
    """Batch-averaged gradients.

    ``dense`` maps dense parameter names to full arrays, ``items`` maps item
    matrix names to ``(row_ids, row_grads)`` for the rows present in the
    batch, ``user`` holds gradients shaped like the user input (summed over
    the batch for a single shared vector, per-row otherwise).
    """

    dense: dict[str, np.ndarray]
    items: dict[str, tuple[np.ndarray, np.ndarray]]
    user: dict[str, np.ndarray]

    def as_param_grads(self) -> dict:
        return {**self.dense, **self.items, **self.user}


def _scatter_rows(items: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(items, kind="stable")
    ordered = items[order]
    starts = np.flatnonzero(np.concatenate(([True], ordered[1:] != ordered[:-1])))
    return ordered[starts], np.add.reduceat(grads[order], starts, axis=0)


def backward(model: GlobalModel, user: UserVector, items, labels, cache: ForwardCache) -> Gradients:
    """Gradients of the mean BCE over the batch that produced ``cache``."""
    cfg = model.config
    items = np.atleast_1d(np.asarray(items, dtype=np.int64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.float64))
    if len(items) != len(cache.items) or not np.array_equal(items, cache.items):
        raise ValueError("forward cache does not match the batch items")
    if len(labels) != len(items):
        raise ValueError("labels and items differ in length")
    n = len(items)
    D = cfg.latent_dim

    # d(mean BCE)/d(logit) = (sigmoid - label) / n
    dlogit = (cache.predictions - labels) / n
    dense = {
        "output.weight": (dlogit @ cache.features)[None, :],
        "output.bias": np.array([dlogit.sum()]),
    }
    dfeat = np.outer(dlogit, model.output.weights[0])
    grads_items = {}
    grads_user = {}
    shared = user.gmf.ndim == 1 if cfg.has_gmf else user.mlp.ndim == 1
    offset = 0
    if cfg.has_gmf:
        dg = dfeat[:, :D]
        offset = D
        du = dg * cache.item_gmf
        grads_user["user_gmf"] = du.sum(axis=0) if shared else du
        grads_items["item_gmf"] = _scatter_rows(items, dg * cache.user_gmf)
    if cfg.has_mlp:
        dx = dfeat[:, offset:]
        for k in range(len(model.tower) - 1, -1, -1):
            dz = dx * (cache.pre_activations[k] > 0)
            dense[f"tower.{k}.weight"] = dz.T @ cache.activations[k]
            dense[f"tower.{k}.bias"] = dz.sum(axis=0)
            dx = dz @ model.tower[k].weights
        du = dx[:, :D]
        grads_user["user_mlp"] = du.sum(axis=0) if shared else du
        grads_items["item_mlp"] = _scatter_rows(items, dx[:, D:])
    ordered = {name: dense[name] for name, _ in cfg.dense_shapes()}
    return Gradients(dense=ordered, items=grads_items, user=grads_user)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict, lr: float = 1e-3) -> tuple[dict, AdamState]:
    """One Adam update, in place.

    ``grads`` values are either full arrays or ``(row_ids, row_grads)`` pairs;
    for the latter only those rows (and their moment estimates) change. Row
    ids must be unique. Parameters without a gradient entry are untouched.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.t
    corr2 = 1.0 - b2**state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if isinstance(g, tuple):
            rows, g = g
            if g.shape[1:] != p.shape[1:] or len(rows) != len(g):
                raise ValueError(f"sparse gradient shape mismatch for {name}")
            mr = m.take(rows, axis=0)
            mr *= b1
            mr += (1.0 - b1) * g
            vr = v.take(rows, axis=0)
            vr *= b2
            vr += (1.0 - b2) * (g * g)
            m[rows] = mr
            v[rows] = vr
            denom = np.sqrt(vr / corr2)
            denom += state.eps
            pr = p.take(rows, axis=0)
            pr -= (lr / corr1) * mr / denom
            p[rows] = pr
        else:
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= (lr / corr1) * m / (np.sqrt(v / corr2) + state.eps)
    return params, state


def predict_scores(model: GlobalModel, user: UserVector, items: Sequence[int]) -> np.ndarray:
    """Element-wise :func:`forward` without exposing the cache."""
    items = np.asarray(items, dtype=np.int64)
    if items.size == 0:
        return np.empty(0)
    pred, _ = forward(model, user, items)
    return pred


def save_parameters(model: GlobalModel, path) -> None:
    """Debug dump: one ``name<TAB>shape<TAB>values`` line per parameter.

    ``shape`` is comma-joined dimensions and ``values`` are space-separated
    ``repr`` floats in C order, so a reload is exact.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for name, arr in model.parameters().items():
            shape = ",".join(str(d) for d in arr.shape)
            values = " ".join(repr(float(x)) for x in arr.ravel())
            fh.write(f"{name}\t{shape}\t{values}\n")


def load_parameters(path) -> dict[str, np.ndarray]:
    params = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            name, shape, values = line.rstrip("\n").split("\t")
            dims = tuple(int(d) for d in shape.split(",")) if shape else ()
            params[name] = np.array([float(x) for x in values.split()]).reshape(dims)
    return params

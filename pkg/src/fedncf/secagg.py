"""MF-SecAvg: pairwise-masked aggregation of item profiles, dense weights and touch counts.

Values travel as elements of the ring Z/2^64 (numpy ``uint64`` with wrapping
arithmetic), so pairwise masks cancel exactly at the server.

Mask generator
--------------
Pair masks are expanded from a 64-bit seed with SplitMix64 in counter form::

    z = (seed + (i + 1) * 0x9E3779B97F4A7C15) mod 2^64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 mod 2^64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB mod 2^64
    out[i] = z ^ (z >> 31)

which is exactly the sequential SplitMix64 stream started from ``seed``.
Test vectors (seed 0): ``0xE220A8397B1DCDAF``, ``0x6E789E6AA1B965F4``,
``0x06C45D188009454F``. The stream is laid out as the item matrices in
``ModelConfig.item_matrix_names()`` order (row-major), then the flat dense
weights, then the touch vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, Optional, Sequence

import numpy as np

from .aggregate import LocalUpdate
from .errors import DropoutError
from .model import GlobalModel, ModelConfig

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64(seed: int, count: int) -> np.ndarray:
    """First ``count`` outputs of SplitMix64 seeded with ``seed``."""
    x = np.arange(1, count + 1, dtype=np.uint64)
    x *= _GAMMA
    x += np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    x ^= x >> np.uint64(30)
    x *= _MIX1
    x ^= x >> np.uint64(27)
    x *= _MIX2
    x ^= x >> np.uint64(31)
    return x


@dataclass(frozen=True)
class FixedPointCodec:
    """Signed fixed-point numbers in Z/2^64 with ``scale_bits`` fractional bits."""

    scale_bits: int = 16

    @property
    def scale(self) -> float:
        return float(1 << self.scale_bits)

    @property
    def limit(self) -> float:
        return float(2 ** (63 - self.scale_bits))

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.size and not np.all(np.abs(x) < self.limit):
            raise OverflowError(
                f"value magnitude exceeds fixed-point headroom 2^{63 - self.scale_bits}"
            )
        return np.rint(x * self.scale).astype(np.int64).view(np.uint64)

    def decode(self, r) -> np.ndarray:
        return np.asarray(r, dtype=np.uint64).view(np.int64) / self.scale


@dataclass(frozen=True)
class PairSeed:
    i: int
    j: int
    seed: int

    def __post_init__(self):
        if not self.i < self.j:
            raise ValueError(f"pair must be ordered i < j, got ({self.i}, {self.j})")

    def peer_of(self, client: int) -> int:
        if client == self.i:
            return self.j
        if client == self.j:
            return self.i
        raise ValueError(f"client {client} is not part of pair ({self.i}, {self.j})")


@dataclass
class RingUpdate:
    """A (item matrices, dense vector, touch vector) triple of ring elements."""

    items: dict[str, np.ndarray]
    dense: np.ndarray
    touched: np.ndarray
    client_id: int = -1

    def arrays(self) -> list[np.ndarray]:
        return [*self.items.values(), self.dense, self.touched]

    def num_elements(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "RingUpdate":
        return RingUpdate(
            {n: a.copy() for n, a in self.items.items()},
            self.dense.copy(),
            self.touched.copy(),
            self.client_id,
        )


class MaskedUpdate(RingUpdate):
    """A client's ring update after pairwise masking; the only thing the server sees."""


@dataclass(frozen=True)
class RoundShapes:
    items: tuple[tuple[str, tuple[int, int]], ...]
    dense_size: int
    num_items: int

    @classmethod
    def from_config(cls, config: ModelConfig) -> "RoundShapes":
        shape = (config.num_items, config.latent_dim)
        return cls(
            tuple((n, shape) for n in config.item_matrix_names()),
            config.dense_size(),
            config.num_items,
        )

    def total(self) -> int:
        return sum(r * c for _, (r, c) in self.items) + self.dense_size + self.num_items


def encode_update(update: LocalUpdate, codec: FixedPointCodec, weight_by: str = "touched") -> RingUpdate:
    """Fixed-point encode a plain update for masking.

    Item rows outside the touched set are zeroed so the server's per-item sum
    only contains rows their owners trained; dense weights are pre-multiplied
    by ``n_i``.
    """
    keep = np.asarray(update.touched, dtype=np.float64)[:, None]
    return RingUpdate(
        items={n: codec.encode(keep * m) for n, m in update.items.items()},
        dense=codec.encode(update.weight(weight_by) * update.dense),
        touched=np.asarray(update.touched, dtype=np.uint64),
        client_id=update.client_id,
    )


def derive_masks(seed: PairSeed | int, shapes: RoundShapes) -> RingUpdate:
    """Expand a pair seed into one mask per transmitted array."""
    value = seed.seed if isinstance(seed, PairSeed) else int(seed)
    stream = splitmix64(value, shapes.total())
    items = {}
    offset = 0
    for name, (rows, cols) in shapes.items:
        items[name] = stream[offset : offset + rows * cols].reshape(rows, cols)
        offset += rows * cols
    dense = stream[offset : offset + shapes.dense_size]
    offset += shapes.dense_size
    return RingUpdate(items, dense, stream[offset:])


def mask_update(encoded: RingUpdate, self_id: int, peer_seeds: Iterable[PairSeed]) -> MaskedUpdate:
    """Add the mask of every pair where we are the smaller id, subtract the rest.

    Masks are derived and applied one peer at a time.
    """
    out = encoded.copy()
    shapes = RoundShapes(
        tuple((n, a.shape) for n, a in out.items.items()), out.dense.size, out.touched.size
    )
    targets = out.arrays()
    for pair in peer_seeds:
        peer = pair.peer_of(self_id)
        mask = derive_masks(pair, shapes)
        for dst, m in zip(targets, mask.arrays()):
            if self_id < peer:
                dst += m
            else:
                dst -= m
    return MaskedUpdate(out.items, out.dense, out.touched, self_id)


def secure_sum(masked: Sequence[RingUpdate], expected: Optional[Iterable[int]] = None) -> RingUpdate:
    """Element-wise ring sum, reduced in ascending client-id order.

    ``expected`` lists the client ids selected for the round; any missing
    update aborts with :class:`DropoutError` since unpaired masks cannot cancel.
    """
    if not masked:
        raise DropoutError("no masked updates received")
    if expected is not None:
        missing = sorted(set(expected) - {m.client_id for m in masked})
        if missing:
            raise DropoutError(f"missing masked updates from clients {missing}")
    ordered = sorted(masked, key=lambda m: m.client_id)
    total = ordered[0].copy()
    for m in ordered[1:]:
        for dst, src in zip(total.arrays(), m.arrays()):
            dst += src
    total.client_id = -1
    return total


def secure_aggregate(
    masked: Sequence[RingUpdate],
    prev: GlobalModel,
    codec: FixedPointCodec,
    expected: Optional[Iterable[int]] = None,
) -> GlobalModel:
    """Server side of MF-SecAvg: per-item averages and FedAvg dense weights from sums only."""
    total = secure_sum(masked, expected)
    counts = total.touched.view(np.int64).astype(np.float64)
    n = counts.sum()
    if n <= 0:
        raise ValueError("no client trained any item this round")
    seen = counts > 0
    items = {}
    for name, old in prev.item_matrices().items():
        new = old.copy()
        new[seen] = codec.decode(total.items[name][seen]) / counts[seen, None]
        items[name] = new
    dense = codec.decode(total.dense) / n
    return prev.replace(items, dense)


def exchange_seeds(client_ids: Iterable[int], rng: np.random.Generator) -> list[PairSeed]:
    """One uniform 64-bit seed per unordered pair, in ascending (i, j) order."""
    ids = sorted(set(int(c) for c in client_ids))
    pairs = list(combinations(ids, 2))
    raw = rng.integers(0, 2**64, size=len(pairs), dtype=np.uint64, endpoint=False)
    return [PairSeed(i, j, int(s)) for (i, j), s in zip(pairs, raw)]


def seeds_for(client: int, seeds: Iterable[PairSeed]) -> list[PairSeed]:
    """The seeds a client can see on the bus: the pairs it belongs to."""
    return [s for s in seeds if client in (s.i, s.j)]


def count_masked_parameters(config: ModelConfig, clients: int) -> int:
    """Mask elements one client generates in a round with ``clients`` participants."""
    if clients < 1:
        raise ValueError("participant count must be >= 1")
    D, n_items = config.latent_dim, config.num_items
    h = config.hidden_layers
    if config.kind == "gmf":
        per_peer = D * n_items + D + 1 + n_items
    else:
        tower = 2 * D * h[0] + sum(a * b for a, b in zip(h, h[1:])) + h[-1] + sum(h) + 1
        if config.kind == "mlp":
            per_peer = D * n_items + tower + n_items
        else:
            per_peer = 2 * D * n_items + tower + D + n_items
    return (clients - 1) * per_peer

"""Simulated multi-rank execution of Physics-Attention.

Ranks are execution contexts inside one process. Each rank holds a contiguous
shard of points; the only communication is two AllReduce calls per layer (slice
masses and eidetic states), both recorded in a :class:`CommLedger`.
"""

from __future__ import annotations

import csv
import io
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attention import (
    NoiseSource,
    PhysicsAttentionParams,
    SliceConfig,
    deslice,
    head_inputs,
    init_physics_attention,
    normalise_states,
    slice_partial_sums,
    state_attention,
)
from .errors import CollectiveError, PartitionError
from .model import ModelConfig, ModelParams, embed, feedforward, head, check_features, init_params, model_forward
from .tensor import Tensor

BYTES_PER_SCALAR = 8
COMM_CSV_HEADER = ("n_points", "rank_count", "M", "C", "H", "scalars_per_layer", "bytes_per_layer")


@dataclass(frozen=True)
class RankPartition:
    n: int
    ranges: tuple[tuple[int, int], ...]

    @property
    def rank_count(self) -> int:
        return len(self.ranges)

    @property
    def sizes(self) -> list[int]:
        return [b - a for a, b in self.ranges]

    def split(self, array):
        return [array[a:b] for a, b in self.ranges]

    def point_ids(self) -> list[np.ndarray]:
        return [np.arange(a, b) for a, b in self.ranges]


def partition_points(n: int, rank_count: int) -> RankPartition:
    """Contiguous near-equal shards; the first ``n % rank_count`` ranks get one extra point."""
    if rank_count < 1:
        raise PartitionError(f"rank_count must be >= 1, got {rank_count}")
    if n < rank_count:
        raise PartitionError(f"cannot split {n} points over {rank_count} ranks")
    base, extra = divmod(n, rank_count)
    ranges, start = [], 0
    for k in range(rank_count):
        stop = start + base + (1 if k < extra else 0)
        ranges.append((start, stop))
        start = stop
    return RankPartition(n, tuple(ranges))


@dataclass(frozen=True)
class CommRecord:
    layer: int | None
    tag: str
    scalars: int

    @property
    def bytes(self) -> int:
        return self.scalars * BYTES_PER_SCALAR


@dataclass
class CommLedger:
    records: list[CommRecord] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def record(self, layer: int | None, tag: str, scalars: int) -> None:
        with self._lock:
            self.records.append(CommRecord(layer, tag, scalars))

    def layer_totals(self) -> dict[int, int]:
        """Scalars per Physics-Attention layer (records without a layer are excluded)."""
        totals: dict[int, int] = {}
        for r in self.records:
            if r.layer is not None:
                totals[r.layer] = totals.get(r.layer, 0) + r.scalars
        return totals

    def calls(self, layer: int) -> list[CommRecord]:
        return [r for r in self.records if r.layer == layer]

    def clear(self) -> None:
        with self._lock:
            self.records.clear()


class Collective:
    """Deterministic AllReduce: ascending-rank left fold, one result shared by all ranks."""

    def __init__(self, rank_count: int, ledger: CommLedger | None = None, workers: int = 1):
        self.rank_count = rank_count
        self.ledger = ledger if ledger is not None else CommLedger()
        self.workers = workers

    def map_ranks(self, fn: Callable[[int], object]) -> list:
        """Run ``fn(rank)`` for every rank; results come back in rank order."""
        if self.workers <= 1:
            return [fn(k) for k in range(self.rank_count)]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, range(self.rank_count)))

    def all_reduce_sum(self, per_rank: Sequence[Tensor], tag: str = "states", layer: int | None = None) -> Tensor:
        return all_reduce_sum(per_rank, self, tag, layer)


def all_reduce_sum(per_rank: Sequence[Tensor], collective: Collective, tag: str = "states",
                   layer: int | None = None) -> Tensor:
    """Elementwise sum of every rank's tensor, replicated to all ranks.

    The backward rule hands the incoming gradient to each contribution
    unchanged; that traffic is not ledgered.
    """
    per_rank = tuple(T.as_tensor(t) for t in per_rank)
    if len(per_rank) != collective.rank_count:
        raise CollectiveError(f"expected {collective.rank_count} contributions, got {len(per_rank)}")
    shapes = [t.shape for t in per_rank]
    if len(set(shapes)) != 1:
        raise CollectiveError(f"AllReduce shape divergence across ranks: {shapes}")
    acc = per_rank[0].data
    for t in per_rank[1:]:
        acc = acc + t.data

    def backward(g):
        return tuple(g for _ in per_rank)

    out = Tensor._wrap(np.array(acc), per_rank, backward, "all_reduce")
    collective.ledger.record(layer, tag, collective.rank_count * per_rank[0].size)
    return out


def parallel_physics_attention(x_parts: Sequence[Tensor], config: SliceConfig, params: PhysicsAttentionParams,
                               noise: NoiseSource | None, collective: Collective, layer: int = 0,
                               point_ids: Sequence[np.ndarray] | None = None) -> list[Tensor]:
    """One Physics-Attention layer over rank shards; returns each rank's output shard."""
    if point_ids is None:
        offsets = np.cumsum([0] + [x.shape[0] for x in x_parts])
        point_ids = [np.arange(a, b) for a, b in zip(offsets[:-1], offsets[1:])]

    def local_weights(k):
        inputs = head_inputs(x_parts[k], config, params, noise, layer, point_ids[k])
        return inputs, T.stack([T.sum_points(hi.w) for hi in inputs])

    local = collective.map_ranks(local_weights)
    mass = collective.all_reduce_sum([m for _, m in local], tag="norms", layer=layer)

    def local_states(k):
        return T.stack([normalise_states(slice_partial_sums(hi.values, hi.w)[0], mass[h], config.eps_denom)
                        for h, hi in enumerate(local[k][0])])

    states = collective.all_reduce_sum(collective.map_ranks(local_states), tag="states", layer=layer)

    def local_output(k):
        outs = [deslice(state_attention(states[h], hp), hi.w)
                for h, (hi, hp) in enumerate(zip(local[k][0], params.heads))]
        merged = outs[0] if len(outs) == 1 else T.concat(outs, axis=1)
        return T.linear(merged, params.out_w, params.out_b)

    return collective.map_ranks(local_output)


def parallel_model_forward(params: ModelParams, config: ModelConfig, features, partition: RankPartition,
                           collective: Collective, mode: str = "no_noise",
                           noise: NoiseSource | None = None) -> list[Tensor]:
    """Full model over rank shards; pointwise sublayers never communicate."""
    features = check_features(config, features)
    slice_cfg = config.slice_config(mode)
    if slice_cfg.noise_mode == "train_noise" and noise is None:
        noise = NoiseSource(config.seed)
    ids = partition.point_ids()
    xs = collective.map_ranks(lambda k: embed(params, features[partition.ranges[k][0]:partition.ranges[k][1]]))
    for i, layer in enumerate(params.layers):
        normed = [T.layer_norm(x, layer.ln1_g, layer.ln1_b) for x in xs]
        attn = parallel_physics_attention(normed, slice_cfg, layer.attn, noise, collective, layer=i, point_ids=ids)
        xs = [x + a for x, a in zip(xs, attn)]
        xs = collective.map_ranks(
            lambda k, layer=layer: xs[k] + feedforward(layer, T.layer_norm(xs[k], layer.ln2_g, layer.ln2_b)))
    return [head(params, x) for x in xs]


# -- communication accounting -------------------------------------------------

def layer_comm_scalars(rank_count: int, M: int, C: int, H: int) -> int:
    """Scalars sent per layer: masses (H*M) plus states (M*C) from every rank."""
    return rank_count * M * (C + H)


def comm_volume_report(M: int, C: int, H: int, rank_count: int, n_points_list: Sequence[int]) -> list[dict]:
    scalars = layer_comm_scalars(rank_count, M, C, H)
    return [dict(n_points=int(n), rank_count=rank_count, M=M, C=C, H=H, scalars_per_layer=scalars,
                 bytes_per_layer=scalars * BYTES_PER_SCALAR) for n in n_points_list]


def comm_rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COMM_CSV_HEADER, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def measure_layer_comm(n: int, rank_count: int, M: int, C: int, H: int, seed: int = 0) -> CommLedger:
    """Run one materialised parallel layer on random points and return its ledger."""
    config = SliceConfig(M=M, H=H, C=C)
    rng = np.random.default_rng(seed)
    params = init_physics_attention(config, rng)
    partition = partition_points(n, rank_count)
    x = rng.standard_normal((n, C))
    collective = Collective(rank_count)
    parallel_physics_attention([Tensor(p) for p in partition.split(x)], config, params, None, collective)
    return collective.ledger


# -- serial / parallel equivalence ---------------------------------------------

@dataclass
class ParallelCheck:
    ranks: int
    forward_dev: float
    blocked_exact: bool
    grad_dev: float | None
    forward_tol: float = 1e-10
    grad_tol: float = 1e-8

    @property
    def passed(self) -> bool:
        grads_ok = self.grad_dev is None or self.grad_dev <= self.grad_tol
        return self.blocked_exact and self.forward_dev <= self.forward_tol and grads_ok

    def line(self) -> str:
        grad = "n/a" if self.grad_dev is None else f"{self.grad_dev:.3e}"
        return (f"{'PASS' if self.passed else 'FAIL'} ranks={self.ranks} forward_dev={self.forward_dev:.3e} "
                f"grad_dev={grad} blocked_exact={self.blocked_exact}")


def scaled_deviation(a: np.ndarray, ref: np.ndarray) -> float:
    """max |a - ref| relative to max |ref|."""
    scale = float(np.max(np.abs(ref)))
    return float(np.max(np.abs(a - ref))) / (scale if scale > 0 else 1.0)


def _grads(params: ModelParams) -> np.ndarray:
    return np.concatenate([(p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
                           for p in params.parameters()])


def serial_parallel_check(config: ModelConfig, n: int, rank_counts: Sequence[int], seed: int = 0,
                          check_grads: bool = True, mode: str = "train_noise") -> list[ParallelCheck]:
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((n, config.d_in))
    probe = rng.standard_normal((n, config.d_out))
    params = init_params(config)
    noise = NoiseSource(seed, step=1)

    T.zero_grad(params.parameters())
    serial = model_forward(params, config, features, mode, noise)
    serial_grads = None
    if check_grads:
        (serial * probe).sum().backward()
        serial_grads = _grads(params)

    results = []
    for ranks in rank_counts:
        partition = partition_points(n, ranks)
        blocked = model_forward(params, config, features, mode, noise, blocks=partition.ranges).data
        collective = Collective(ranks)
        T.zero_grad(params.parameters())
        outs = parallel_model_forward(params, config, features, partition, collective, mode, noise)
        merged = np.concatenate([o.data for o in outs])
        grad_dev = None
        if check_grads:
            local = [(o * p).sum() for o, p in zip(outs, partition.split(probe))]
            collective.all_reduce_sum([l.reshape(1) for l in local], tag="loss").sum().backward()
            grad_dev = scaled_deviation(_grads(params), serial_grads)
        results.append(ParallelCheck(ranks, scaled_deviation(merged, serial.data),
                                     bool(np.array_equal(merged, blocked)), grad_dev))
    T.zero_grad(params.parameters())
    return results

"""Communication volumes for dispatching CA tasks and the minimal-communication shard."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import CATask, ClusterConfig, Chunk, DomainError, Item, Layout, ModelConfig
from .cost import linear_flops_per_token


@dataclass(frozen=True)
class ShardBound:
    per_token_flops: int
    token_time: float  # seconds of context-independent compute per token
    bound: float  # max shards per document whose dispatch hides behind compute
    communication_bound: bool


def shard_count_upper_bound(config: ModelConfig, cluster: ClusterConfig) -> ShardBound:
    """Largest shard count ``s`` with ``t*B >= size_q + size_kv*(s+1)/2``.

    ``t`` is the per-token context-independent compute time. An evenly sharded
    document ships every query once and the ``k``-th KV shard to ``s - k``
    query shards, so per token the wire carries ``size_q + size_kv*(s+1)/2``.
    """
    flops = linear_flops_per_token(config)
    t = flops / (cluster.mfu_linear * cluster.peak_flops)
    tb = t * cluster.interconnect_bandwidth
    if tb <= config.size_q:
        return ShardBound(flops, t, 0, True)
    raw = 2 * (tb - config.size_q) / config.size_kv - 1
    bound = math.inf if math.isinf(raw) else max(math.floor(raw), 0)
    return ShardBound(flops, t, bound, False)


def even_shard_comm_bytes(length: int, shards: int, config: ModelConfig) -> float:
    """Bytes to dispatch a ``length``-token document cut into ``shards`` equal shards."""
    return length * config.size_q + (shards + 1) * length * config.size_kv / 2


def _check_accounting(residency_aware: bool):
    if residency_aware:
        raise NotImplementedError("residency-aware KV accounting is reserved and not implemented")


def shard_comm_bytes(item: Item, config: ModelConfig, count_both_halves: bool = False) -> int:
    """Q + KV bytes needed to run ``item`` away from its home device."""
    if item.layout is Layout.HEAD_TAIL:
        q_tokens = item.query_tokens if count_both_halves else item.n_q
        kv_tokens = item.doc_length - (item.kv_extent - item.n_q)
        return q_tokens * config.size_q + kv_tokens * config.size_kv
    return item.n_q * config.size_q + item.kv_extent * config.size_kv


def output_bytes(item: Item, config: ModelConfig, count_both_halves: bool = False) -> int:
    q_tokens = item.query_tokens if count_both_halves else item.n_q
    return q_tokens * config.size_q


def task_comm_bytes(
    task: CATask,
    config: ModelConfig,
    *,
    count_both_halves: bool = False,
    residency_aware: bool = False,
) -> int:
    """Dispatch bytes for a task; zero when it runs on its home device.

    Every query and context token is assumed to travel, even if the server
    already holds some of the K/V.
    """
    _check_accounting(residency_aware)
    if task.assigned_server == task.source_device:
        return 0
    return shard_comm_bytes(task.item, config, count_both_halves)


def allgather_volume_cp(chunk, cp_degree: int, config: ModelConfig) -> float:
    """Bytes each CP rank receives when all-gathering the chunk's KV states."""
    if cp_degree < 1:
        raise DomainError("cp_degree must be >= 1")
    tokens = chunk.total_tokens if isinstance(chunk, Chunk) else int(chunk)
    return tokens * config.size_kv * (cp_degree - 1) / cp_degree


@dataclass(frozen=True)
class CommQuery:
    """Request to move ``delta_f_max`` of an item's ``f_item`` FLOPs at minimal bytes.

    ``L_q``/``L_kv`` are the item's query length and causal context end (the
    head half for head-tail items). ``tile_size`` sets the cut granularity in
    absolute document positions; 1 means unconstrained.
    """

    delta_f_max: float
    f_item: float
    L_q: int
    L_kv: int
    size_q: int
    size_kv: int
    layout: Layout = Layout.CONTIGUOUS
    doc_length: int | None = None
    tile_size: int = 1

    def __post_init__(self):
        object.__setattr__(self, "layout", Layout(self.layout))
        if self.f_item <= 0 or self.delta_f_max <= 0:
            raise DomainError("delta_f_max and f_item must be positive")
        if self.delta_f_max > self.f_item * (1 + 1e-12):
            raise DomainError(
                f"infeasible flops fraction {self.delta_f_max / self.f_item:.6g} > 1"
            )
        if not 1 <= self.L_q <= self.L_kv:
            raise DomainError(f"need 1 <= L_q <= L_kv, got {self.L_q}, {self.L_kv}")
        if self.size_q <= 0 or self.size_kv <= 0:
            raise DomainError("sizes must be positive")
        if self.layout is Layout.HEAD_TAIL and (self.doc_length is None or 2 * self.L_kv > self.doc_length):
            raise DomainError("head_tail queries need doc_length >= 2 * L_kv")

    @property
    def frac_target(self) -> float:
        return min(self.delta_f_max / self.f_item, 1.0)

    @property
    def kv_ratio(self) -> float:
        return self.size_kv / self.size_q

    @property
    def item_start(self) -> int:
        return self.L_kv - self.L_q

    def item_pair_work(self) -> int:
        return self.L_q * (2 * self.L_kv - self.L_q)

    def target_pair_work(self) -> int:
        exact = self.frac_target * self.item_pair_work()
        return min(math.ceil(exact - 1e-9 * exact), self.item_pair_work())

    def bytes_for(self, n_q: float, n_kv: float) -> float:
        if self.layout is Layout.HEAD_TAIL:
            return n_q * self.size_q + (self.doc_length - (n_kv - n_q)) * self.size_kv
        return n_q * self.size_q + n_kv * self.size_kv


class MinCommShard(NamedTuple):
    n_q: int
    n_kv: int
    bytes: int

    @property
    def start(self) -> int:
        return self.n_kv - self.n_q


def continuous_min_comm(q: CommQuery) -> tuple[float, float, float]:
    """Real-valued optimum ``(n_q, n_kv, bytes)`` before tile rounding.

    Along the iso-FLOPs curve ``n_q * (2 n_kv - n_q) = T`` the contiguous cost
    ``n_q*(size_q + size_kv/2) + size_kv*T/(2 n_q)`` is convex with minimum at
    ``n_q = sqrt(r*T/(r+2))``, ``r = size_kv/size_q``; it is clamped to the range
    where the shard stays inside the item. The head-tail cost grows with
    ``n_q``, so the shard hugs the end of the head range.
    """
    T = q.frac_target * q.item_pair_work()
    L_kv, a = q.L_kv, q.item_start
    n_q_lo = L_kv - math.sqrt(max(L_kv * L_kv - T, 0.0))
    if q.layout is Layout.HEAD_TAIL:
        n_q = n_q_lo
        n_kv = float(L_kv)
    else:
        r = q.kv_ratio
        n_q_hi = min(math.sqrt(a * a + T) - a, float(q.L_q))
        n_q = math.sqrt(r * T / (r + 2))
        n_q = min(max(n_q, n_q_lo), n_q_hi)
        n_kv = min((T / n_q + n_q) / 2, float(L_kv))
    return n_q, n_kv, q.bytes_for(n_q, n_kv)


def _grid_points(a: int, b: int, tile: int) -> np.ndarray:
    tile = max(tile, 1)
    first = (a // tile + 1) * tile
    inner = np.arange(first, b, tile, dtype=np.int64)
    return np.concatenate(([a], inner, [b])).astype(np.int64)


def v_min_comm(q: CommQuery) -> MinCommShard:
    """Cheapest tile-aligned shard delivering at least ``frac_target`` of the item's work.

    Cut points are ``L_kv - L_q``, ``L_kv`` and every multiple of ``tile_size``
    between them. For each candidate end ``e`` the latest start that still
    meets the target is the cheapest, so the search is one pass over ends.
    Rounding only ever moves a cut outward, so the shard never delivers less
    than asked.
    """
    a, b = q.item_start, q.L_kv
    target = q.target_pair_work()
    if target >= q.item_pair_work():
        return MinCommShard(q.L_q, q.L_kv, int(q.bytes_for(q.L_q, q.L_kv)))
    points = _grid_points(a, b, q.tile_size)
    ends = points[1:]
    slack = ends * ends - target
    ok = slack >= a * a
    ends, slack = ends[ok], slack[ok]
    root = np.floor(np.sqrt(slack.astype(float))).astype(np.int64)
    root -= (root * root > slack).astype(np.int64)
    root += ((root + 1) * (root + 1) <= slack).astype(np.int64)
    # snap each start down to the nearest cut point
    idx = np.searchsorted(points, root, side="right") - 1
    starts = points[idx]
    n_q = ends - starts
    if q.layout is Layout.HEAD_TAIL:
        cost = n_q * q.size_q + (q.doc_length - starts) * q.size_kv
    else:
        cost = n_q * q.size_q + ends * q.size_kv
    delivered = ends * ends - starts * starts
    k = np.lexsort((ends, delivered, cost))[0]
    return MinCommShard(int(n_q[k]), int(ends[k]), int(cost[k]))


def check_min_comm_constraints(q: CommQuery, shard: MinCommShard) -> list[str]:
    """Re-verify a shard against the shard constraints (after rounding)."""
    problems = []
    if not 0 < shard.n_q <= q.L_q:
        problems.append(f"n_q={shard.n_q} outside (0, {q.L_q}]")
    if not shard.n_q + q.L_kv - q.L_q <= shard.n_kv <= q.L_kv:
        problems.append(f"n_kv={shard.n_kv} outside [{shard.n_q + q.L_kv - q.L_q}, {q.L_kv}]")
    delivered = shard.n_q * (2 * shard.n_kv - shard.n_q)
    if delivered < q.target_pair_work():
        problems.append(f"delivers {delivered} < target {q.target_pair_work()}")
    if shard.bytes != int(q.bytes_for(shard.n_q, shard.n_kv)):
        problems.append("bytes do not match the shard extents")
    return problems


def head_tail_shard_for_work(item: Item, target_pairs: int, tile_size: int) -> tuple[int, int]:
    """Sub-range ``[s, e)`` of a head-tail item's head covering ``target_pairs`` of true work.

    A head-tail sub-shard ``[s, e)`` with its mirrored tail costs
    ``2 * L * (e - s)`` pair units wherever it sits, so it is placed at the end
    of the head range, which needs the least KV.
    """
    L = item.doc_length
    n_q = -(-target_pairs // (2 * L))
    tile = max(tile_size, 1)
    s = min(item.q_end - n_q, item.q_end - 1)
    s = max((s // tile) * tile, item.q_start)
    return s, item.q_end


def kv_token_span(item: Item) -> int:
    """Context positions ``[0, span)`` a task needs K/V for."""
    if item.layout is Layout.HEAD_TAIL:
        return item.doc_length - item.q_start
    return item.q_end


KVOwners = dict[int, list[tuple[int, int, int]]]


class DispatchLedger:
    """Per-device dispatch bytes of one nano-batch.

    Without ``kv_owners`` every migrated task's bytes leave its home device
    and land on its server. With it, only the query part leaves home; the K/V
    prefix of a document is sent once per destination by the devices holding
    those positions (``(start, end, device)`` pieces), and positions the
    destination holds itself are free.
    """

    def __init__(self, n_devices: int, size_kv: int, kv_owners: KVOwners | None = None):
        self.send = np.zeros(n_devices)
        self.recv = np.zeros(n_devices)
        self.size_kv = size_kv
        self.kv_owners = kv_owners
        self._span: dict[tuple[int, int], int] = {}

    def charges(self, item: Item, source: int, dest: int, comm_bytes: float) -> tuple[dict[int, float], float]:
        """Bytes each device would send, and ``dest`` would receive, for one task."""
        pieces = self.kv_owners.get(item.doc_id) if self.kv_owners is not None else None
        if not pieces:
            return {source: float(comm_bytes)}, float(comm_bytes)
        span = kv_token_span(item)
        q_bytes = float(comm_bytes - span * self.size_kv)
        sends = {source: q_bytes}
        recv = q_bytes
        lo = self._span.get((item.doc_id, dest), 0)
        for a, b, owner in pieces:
            if a >= span:
                break
            take = min(b, span) - max(a, lo)
            if take <= 0 or owner == dest:
                continue
            sends[owner] = sends.get(owner, 0.0) + take * self.size_kv
            recv += take * self.size_kv
        return sends, recv

    def fits(self, item: Item, source: int, dest: int, comm_bytes: float, budget) -> bool:
        sends, recv = self.charges(item, source, dest, comm_bytes)
        if self.recv[dest] + recv > budget[dest]:
            return False
        return all(self.send[d] + b <= budget[d] for d, b in sends.items())

    def add(self, item: Item, source: int, dest: int, comm_bytes: float) -> None:
        sends, recv = self.charges(item, source, dest, comm_bytes)
        for d, b in sends.items():
            self.send[d] += b
        self.recv[dest] += recv
        if self.kv_owners is not None and item.doc_id in self.kv_owners:
            key = (item.doc_id, dest)
            self._span[key] = max(self._span.get(key, 0), kv_token_span(item))

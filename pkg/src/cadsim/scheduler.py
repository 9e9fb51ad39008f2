"""Communication-aware greedy balancing of CA tasks across attention servers."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .comm import CommQuery, DispatchLedger, KVOwners, _grid_points, head_tail_shard_for_work, output_bytes, shard_comm_bytes, v_min_comm
from .core import CATask, ClusterConfig, Chunk, DomainError, Item, Layout, ModelConfig
from .cost import CostCoefficients


@dataclass(frozen=True)
class ScheduleContext:
    """Constants the scheduler needs besides the items.

    ``alpha`` converts pair work into FLOPs. The default unit sizes make the
    scheduler usable on abstract instances.
    """

    alpha: float = 1.0
    size_q: int = 1
    size_kv: int = 2
    tile_size: int = 1
    e_threshold: float = 0.01
    whole_item_fraction: float = 0.9
    count_both_halves: bool = False
    max_moves: int | None = None

    @classmethod
    def from_configs(cls, model: ModelConfig, cluster: ClusterConfig, layers: int = 1, **kwargs) -> "ScheduleContext":
        coeff = CostCoefficients.from_model(model, layers)
        return cls(
            alpha=coeff.alpha_ca,
            size_q=model.size_q,
            size_kv=model.size_kv,
            tile_size=cluster.tile_size,
            **kwargs,
        )

    def comm_bytes(self, item: Item) -> int:
        model = _Sizes(self.size_q, self.size_kv)
        return shard_comm_bytes(item, model, self.count_both_halves)

    def return_bytes(self, item: Item) -> int:
        return output_bytes(item, _Sizes(self.size_q, self.size_kv), self.count_both_halves)


@dataclass(frozen=True)
class _Sizes:
    size_q: int
    size_kv: int


@dataclass
class ServerLoad:
    device: int
    assigned_flops: float = 0.0
    items: list[Item] = field(default_factory=list)
    sent_bytes: int = 0
    received_bytes: int = 0


@dataclass(frozen=True)
class Proposal:
    """One candidate move of (part of) ``item`` from ``source`` to ``dest``."""

    source: int
    dest: int
    item: Item
    delta_f_max: float
    shard: Item
    remainder: tuple[Item, ...]
    delivered_pairs: int
    v_comm: int
    priority_E: float


@dataclass(frozen=True)
class Rejection:
    source: int
    dest: int
    item: Item
    reason: str


@dataclass
class SchedulePlan:
    tasks: list[CATask]
    per_server: list[ServerLoad]
    target: float
    max_load: float
    min_load: float
    total_comm_bytes: int
    total_return_bytes: int
    epsilon_used: float
    tolerance_met: bool
    tolerance_slack: float
    migrations: int
    stop_reason: str
    rejections: int = 0

    @property
    def total_flops(self) -> float:
        return sum(t.flops for t in self.tasks)

    def max_deviation(self) -> float:
        return max(abs(s.assigned_flops - self.target) for s in self.per_server)

    def records(self) -> list[dict]:
        out = []
        for t in self.tasks:
            it = t.item
            out.append(
                {
                    "doc": it.doc_id,
                    "q_range": [it.q_start, it.q_end],
                    "layout": it.layout.value,
                    "doc_length": it.doc_length,
                    "source": t.source_device,
                    "server": t.assigned_server,
                    "flops": t.flops,
                    "bytes": t.comm_bytes,
                    "return_bytes": t.return_bytes,
                }
            )
        return out

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_plan_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _item_flops(item, alpha: float) -> float:
    return alpha * item.pair_work()


def target_load(items, n_servers: int, alpha: float = 1.0) -> float:
    """Mean CA load per server; ``items`` may be Items or raw FLOPs values."""
    if n_servers < 1:
        raise DomainError("n_servers must be >= 1")
    total = sum(_item_flops(x, alpha) if isinstance(x, Item) else x for x in items)
    return total / n_servers


def classify_servers(loads, target: float) -> tuple[list[tuple[int, float]], list[tuple[int, float]]]:
    """Split servers into surplus and deficit lists, each sorted by gap size, largest first.

    ``loads`` is a sequence of numbers (indexed by device) or ServerLoads.
    Ties keep the lower device index first.
    """
    pairs = []
    for i, x in enumerate(loads):
        if isinstance(x, ServerLoad):
            pairs.append((x.device, x.assigned_flops))
        else:
            pairs.append((i, x))
    surplus = sorted(((d, v - target) for d, v in pairs if v > target), key=lambda p: (-p[1], p[0]))
    deficit = sorted(((d, target - v) for d, v in pairs if v < target), key=lambda p: (-p[1], p[0]))
    return surplus, deficit


def min_shard_pairs(item: Item, tile_size: int) -> int:
    """Pair work of the smallest tile-aligned piece that could be cut from ``item``.

    For a contiguous item that is the lighter of its first and last piece.
    """
    tile = max(tile_size, 1)
    if item.layout is Layout.HEAD_TAIL:
        return 2 * item.doc_length * min(tile, item.n_q)
    first_cut = min((item.q_start // tile + 1) * tile, item.q_end)
    last_cut = max(((item.q_end - 1) // tile) * tile, item.q_start)
    first = first_cut * first_cut - item.q_start * item.q_start
    last = item.q_end * item.q_end - last_cut * last_cut
    return min(first, last)


def _cut(item: Item, start: int, end: int) -> tuple[Item, tuple[Item, ...]]:
    shard = replace(item, q_start=start, q_end=end)
    rest = []
    if item.q_start < start:
        rest.append(replace(item, q_end=start))
    if end < item.q_end:
        rest.append(replace(item, q_start=end))
    return shard, tuple(rest)


def _shard_extents(item: Item, delta_pairs: float, ctx: ScheduleContext) -> tuple[int, int]:
    if item.layout is Layout.HEAD_TAIL:
        return head_tail_shard_for_work(item, math.ceil(delta_pairs), ctx.tile_size)
    q = CommQuery(
        delta_f_max=delta_pairs,
        f_item=item.pair_work(),
        L_q=item.n_q,
        L_kv=item.kv_extent,
        size_q=ctx.size_q,
        size_kv=ctx.size_kv,
        tile_size=ctx.tile_size,
    )
    shard = v_min_comm(q)
    return shard.start, shard.n_kv


def _shrink(item: Item, start: int, end: int, tile: int) -> tuple[int, int] | None:
    """Next smaller tile-aligned shard with the same end, or None."""
    nxt = max((start // tile + 1) * tile, item.q_start)
    if nxt >= end:
        return None
    return nxt, end


def _under_extents(item: Item, delta_pairs: float, ctx: ScheduleContext) -> tuple[int, int] | None:
    """Heaviest tile-aligned contiguous shard delivering at most ``delta_pairs`` (cheapest on ties)."""
    if item.layout is Layout.HEAD_TAIL:
        return None
    points = _grid_points(item.q_start, item.q_end, ctx.tile_size)
    ends = points[1:]
    floor_sq = np.maximum(ends * ends - int(math.floor(delta_pairs)), 0)
    # exact integer ceil(sqrt(floor_sq))
    root = np.floor(np.sqrt(floor_sq.astype(float))).astype(np.int64)
    root -= (root * root > floor_sq).astype(np.int64)
    root += ((root + 1) * (root + 1) <= floor_sq).astype(np.int64)
    need = root + (root * root < floor_sq).astype(np.int64)
    idx = np.minimum(np.searchsorted(points, need, side="left"), len(points) - 1)
    starts = points[idx]
    ok = starts < ends
    if not ok.any():
        return None
    ends, starts = ends[ok], starts[ok]
    delivered = ends * ends - starts * starts
    cost = (ends - starts) * ctx.size_q + ends * ctx.size_kv
    k = np.lexsort((ends, cost, -delivered))[0]
    return int(starts[k]), int(ends[k])


def propose_migration(
    source: ServerLoad,
    dest: ServerLoad,
    item: Item,
    ctx: ScheduleContext,
    target: float,
) -> Proposal | Rejection:
    """Best shard of ``item`` to move from ``source`` to ``dest``.

    ``delta_f_max = min(F_item, surplus, deficit)``; the shard is the cheapest
    one delivering at least that much. A shard that would overshoot either
    server far enough to worsen its gap is shrunk by one tile, and moves that
    help neither side are rejected.
    """
    alpha = ctx.alpha
    tile = max(ctx.tile_size, 1)
    f_item = item.pair_work()
    surplus = (source.assigned_flops - target) / alpha
    deficit = (target - dest.assigned_flops) / alpha
    delta = min(f_item, surplus, deficit)
    if delta <= 0:
        return Rejection(source.device, dest.device, item, "no surplus or deficit")
    if min_shard_pairs(item, tile) >= 2 * delta:
        return Rejection(source.device, dest.device, item, "below one tile of work")
    whole = (item.q_start, item.q_end)
    if delta >= f_item:
        start, end = whole
    else:
        start, end = _shard_extents(item, delta, ctx)
    # candidates in preference order: the cheapest shard reaching delta, the same
    # shard one tile shorter, and the heaviest shard falling short of delta
    extents = [(start, end)]
    smaller = _shrink(item, start, end, tile)
    if smaller is not None:
        extents.append(smaller)
    if end * end - start * start > delta:
        under = _under_extents(item, delta, ctx)
        if under is not None:
            extents.append(under)
    if delta < ctx.whole_item_fraction * f_item:
        # moving the whole item is only allowed when nearly all of it was asked for
        extents = [e for e in extents if e != whole]
        if not extents:
            return Rejection(source.device, dest.device, item, "rounding consumes the item")
    best = None
    for ext in extents:
        cand, cand_rest = _cut(item, *ext)
        got = cand.pair_work()
        if got >= 2 * deficit or got >= 2 * surplus:
            continue
        miss = (abs(deficit - got), abs(surplus - got))
        if best is None or miss < best[0]:
            best = (miss, cand, cand_rest, got)
    if best is None:
        return Rejection(source.device, dest.device, item, "overshoots")
    _, shard, rest, delivered = best
    v = ctx.comm_bytes(shard)
    delta_f = delta * alpha
    return Proposal(
        source=source.device,
        dest=dest.device,
        item=item,
        delta_f_max=delta_f,
        shard=shard,
        remainder=rest,
        delivered_pairs=delivered,
        v_comm=v,
        priority_E=delta_f / v if v > 0 else math.inf,
    )


def _rank(p: Proposal):
    return (-p.priority_E, -p.delta_f_max, p.item.doc_id, p.item.q_start, p.source)


def _tile_slack(items: Iterable[Item], tile: int, alpha: float) -> float:
    worst = 0
    for it in items:
        if it.layout is Layout.HEAD_TAIL:
            worst = max(worst, 2 * it.doc_length * tile)
        else:
            t = min(tile, it.q_end)
            worst = max(worst, t * (2 * it.q_end - t))
    return alpha * worst


def schedule(
    items: Sequence[Item],
    n_servers: int,
    epsilon: float = 0.0,
    e_threshold: float | None = None,
    ctx: ScheduleContext | None = None,
    budget: float | Sequence[float] | None = None,
    kv_owners: KVOwners | None = None,
) -> SchedulePlan:
    """Greedy rebalancing of CA items across ``n_servers`` attention servers.

    Servers are served one deficit at a time, largest first. For the current
    destination every resident item on every surplus server is priced
    (FLOPs moved per byte) and the best one moves, after which both loads
    are updated. A destination that no candidate can help is retired. The
    loop ends once every server lies within ``epsilon * F̄`` of the mean, when
    the best normalized priority drops below ``e_threshold``, or when no
    destination is left.

    ``epsilon`` only decides where the move sequence stops, so a larger
    tolerance always yields a prefix of the moves made under a smaller one.

    ``budget`` caps the dispatch bytes any server may send or receive
    (a scalar or one value per server); moves that would break it are
    rejected. Bytes are attributed as in :class:`DispatchLedger`, using
    ``kv_owners`` when given; in that case the priority divides by the bytes
    a move would add (K/V the destination holds or already received is free)
    rather than by the shard's full dispatch volume.
    """
    ctx = ctx or ScheduleContext()
    if epsilon < 0:
        raise DomainError("epsilon must be >= 0")
    if n_servers < 1:
        raise DomainError("n_servers must be >= 1")
    threshold = ctx.e_threshold if e_threshold is None else e_threshold
    alpha = ctx.alpha
    for it in items:
        if not 0 <= it.home_device < n_servers:
            raise DomainError(f"item {it.key} has home device {it.home_device} outside 0..{n_servers - 1}")

    resident: list[list[Item]] = [[] for _ in range(n_servers)]
    for it in items:
        resident[it.home_device].append(it)
    loads = [ServerLoad(d, alpha * sum(i.pair_work() for i in resident[d])) for d in range(n_servers)]
    incoming: list[list[Item]] = [[] for _ in range(n_servers)]
    target = target_load(items, n_servers, alpha)
    tol = epsilon * target
    avg_bytes = (sum(ctx.comm_bytes(i) for i in items) / len(items)) if items else 1.0
    e_scale = target / avg_bytes if target > 0 else 1.0
    max_moves = ctx.max_moves or 20 * (len(items) + n_servers) + 1000

    ledger = DispatchLedger(n_servers, ctx.size_kv, kv_owners)
    if budget is not None:
        budget = [float(budget)] * n_servers if isinstance(budget, (int, float)) else [float(b) for b in budget]
        if len(budget) != n_servers:
            raise DomainError("budget needs one value per server")

    exhausted: set[int] = set()
    current: int | None = None
    moves = rejections = 0
    stop = "balanced"
    while True:
        if all(abs(s.assigned_flops - target) <= tol for s in loads):
            stop = "within tolerance"
            break
        if moves >= max_moves:
            stop = "move limit"
            break
        if current is None or current in exhausted or loads[current].assigned_flops >= target:
            open_deficits = [
                (target - s.assigned_flops, -s.device) for s in loads
                if s.assigned_flops < target and s.device not in exhausted
            ]
            if not open_deficits:
                stop = "no destination left"
                break
            current = -max(open_deficits)[1]
        dest = loads[current]
        best = None
        for src in loads:
            if src.assigned_flops <= target:
                continue
            for it in resident[src.device]:
                prop = propose_migration(src, dest, it, ctx, target)
                if isinstance(prop, Rejection):
                    rejections += 1
                    continue
                if budget is not None and not ledger.fits(prop.shard, prop.source, prop.dest, prop.v_comm, budget):
                    rejections += 1
                    continue
                if kv_owners is not None:
                    # price the bytes this move would really add, given what dest already holds
                    _, added = ledger.charges(prop.shard, prop.source, prop.dest, prop.v_comm)
                    prop = replace(prop, priority_E=prop.delta_f_max / added if added > 0 else math.inf)
                if best is None or _rank(prop) < _rank(best):
                    best = prop
        if best is None:
            exhausted.add(current)
            continue
        if best.priority_E / e_scale < threshold:
            stop = "priority below threshold"
            break
        src = loads[best.source]
        pool = resident[best.source]
        pool.remove(best.item)
        pool.extend(best.remainder)
        incoming[best.dest].append(best.shard)
        moved = alpha * best.delivered_pairs
        src.assigned_flops -= moved
        dest.assigned_flops += moved
        src.sent_bytes += best.v_comm
        ledger.add(best.shard, best.source, best.dest, best.v_comm)
        dest.received_bytes += best.v_comm
        moves += 1

    tasks = []
    for d in range(n_servers):
        for it in resident[d]:
            tasks.append(CATask(it, d, d, 0, 0, _item_flops(it, alpha)))
        for it in incoming[d]:
            src = it.home_device
            tasks.append(CATask(it, src, d, ctx.comm_bytes(it), ctx.return_bytes(it), _item_flops(it, alpha)))
        loads[d].items = list(resident[d]) + list(incoming[d])
    tasks.sort(key=lambda t: (t.item.doc_id, t.item.q_start, t.assigned_server))
    slack = _tile_slack(items, max(ctx.tile_size, 1), alpha)
    dev = max((abs(s.assigned_flops - target) for s in loads), default=0.0)
    values = [s.assigned_flops for s in loads]
    return SchedulePlan(
        tasks=tasks,
        per_server=loads,
        target=target,
        max_load=max(values),
        min_load=min(values),
        total_comm_bytes=sum(t.comm_bytes for t in tasks),
        total_return_bytes=sum(t.return_bytes for t in tasks),
        epsilon_used=epsilon,
        tolerance_met=dev <= tol + slack,
        tolerance_slack=slack,
        migrations=moves,
        stop_reason=stop,
        rejections=rejections,
    )


def schedule_pp_tick(
    per_stage_items: Mapping[int, Sequence[Item]] | Sequence[Sequence[Item]],
    n_servers: int,
    epsilon: float = 0.0,
    e_threshold: float | None = None,
    ctx: ScheduleContext | None = None,
) -> SchedulePlan:
    """Pool the CA items of every pipeline stage in one tick and balance them.

    Stage ``s`` is server ``s``; stages with no items take part as empty
    servers and soak up load.
    """
    if isinstance(per_stage_items, Mapping):
        stages = per_stage_items.items()
    else:
        stages = enumerate(per_stage_items)
    pool = []
    for stage, its in stages:
        if not 0 <= stage < n_servers:
            raise DomainError(f"stage {stage} outside 0..{n_servers - 1}")
        pool.extend(replace(it, home_device=stage) for it in its)
    return schedule(pool, n_servers, epsilon, e_threshold, ctx)


def items_from_chunks(chunks: Sequence[Chunk], doc_lengths: Mapping[int, int] | None = None) -> list[Item]:
    """One contiguous item per chunk segment, homed on the chunk's device."""
    out = []
    for ch in chunks:
        for seg in ch.segments:
            length = doc_lengths.get(seg.doc_id) if doc_lengths else None
            out.append(Item(seg.doc_id, seg.start, seg.end, ch.device, Layout.CONTIGUOUS, length))
    return out

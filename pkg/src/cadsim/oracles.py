"""Brute-force reference implementations used to check the fast code paths.

These are deliberately naive: plain loops over every candidate, no numpy,
so they share no logic with the functions they check.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .comm import CommQuery, check_min_comm_constraints, v_min_comm
from .core import Item, Layout
from .scheduler import ScheduleContext, schedule


# ---------------------------------------------------------------- v(.) search

def grid_cut_points(q: CommQuery) -> list[int]:
    a, b, t = q.item_start, q.L_kv, max(q.tile_size, 1)
    pts = {a, b}
    pts.update(p for p in range(a, b + 1) if p % t == 0)
    return sorted(pts)


def brute_force_min_comm(q: CommQuery) -> tuple[int, int, int]:
    """``(n_q, n_kv, bytes)`` of the cheapest cut-aligned shard meeting the target.

    Tries every pair of cut points ``s < e``; the shard is ``[s, e)``.
    """
    target = q.target_pair_work()
    pts = grid_cut_points(q)
    best = None
    for i, s in enumerate(pts):
        for e in pts[i + 1:]:
            if e * e - s * s < target:
                continue
            cost = int(q.bytes_for(e - s, e))
            key = (cost, e * e - s * s, e)
            if best is None or key < best[0]:
                best = (key, (e - s, e, cost))
    if best is None:
        raise ValueError("no shard meets the target")
    return best[1]


def random_comm_query(rng: random.Random) -> CommQuery:
    layout = rng.choice([Layout.CONTIGUOUS, Layout.HEAD_TAIL])
    tile = rng.choice([1, 16, 64, 128])
    max_len = 600 if tile == 1 else 16384
    if layout is Layout.HEAD_TAIL:
        L = rng.randrange(2, max_len)
        L_kv = rng.randrange(1, L // 2 + 1)
        L_q = rng.randrange(1, L_kv + 1)
        doc = L
    else:
        L_kv = rng.randrange(1, max_len)
        L_q = rng.randrange(1, L_kv + 1)
        doc = None
    f_item = L_q * (2 * L_kv - L_q)
    frac = rng.uniform(0.01, 1.0)
    size_q = rng.choice([1, 2, 16384])
    size_kv = rng.choice([1, 2, 4096, 8192])
    return CommQuery(frac * f_item, f_item, L_q, L_kv, size_q, size_kv, layout, doc, tile)


@dataclass
class VminReport:
    queries: int
    max_excess: float
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations and self.max_excess <= 0.01


def vmin_oracle(n: int = 100, seed: int = 0) -> VminReport:
    """Compare :func:`v_min_comm` with brute force on ``n`` random queries."""
    rng = random.Random(seed)
    worst, bad = 0.0, []
    for k in range(n):
        q = random_comm_query(rng)
        got = v_min_comm(q)
        _, _, ref = brute_force_min_comm(q)
        worst = max(worst, got.bytes / ref - 1.0)
        bad.extend(f"query {k}: {p}" for p in check_min_comm_constraints(q, got))
    return VminReport(n, worst, bad)


# ---------------------------------------------------------- scheduler optimum

def tile_pieces(item: Item, tile: int) -> list[int]:
    """Pair work of each tile-aligned row block of a contiguous item."""
    cuts = [item.q_start] + [p for p in range(item.q_start + 1, item.q_end) if p % tile == 0] + [item.q_end]
    return [e * e - s * s for s, e in zip(cuts, cuts[1:])]


def exhaustive_min_max_load(pieces: list[int], servers: int) -> int:
    """Smallest achievable max load when each piece may go to any server.

    Depth-first branch and bound over pieces in decreasing order; servers with
    equal load are interchangeable, so only one of them is tried.
    """
    pieces = sorted(pieces, reverse=True)
    total = sum(pieces)
    lower = max(-(-total // servers), pieces[0] if pieces else 0)
    best = [sum(pieces)]
    loads = [0] * servers

    def go(i: int, current_max: int):
        if current_max >= best[0]:
            return
        if i == len(pieces):
            best[0] = current_max
            return
        seen = set()
        for s in range(servers):
            if loads[s] in seen:
                continue
            seen.add(loads[s])
            loads[s] += pieces[i]
            go(i + 1, max(current_max, loads[s]))
            loads[s] -= pieces[i]
            if best[0] == lower:
                return

    go(0, 0)
    return best[0]


def random_small_instance(rng: random.Random, tile: int = 64) -> tuple[list[Item], int]:
    servers = rng.randint(2, 3)
    n_items = rng.randint(1, 5)
    items = []
    for doc in range(n_items):
        length = rng.randint(1, 4 * tile)
        items.append(Item(doc, 0, length, rng.randrange(servers), Layout.CONTIGUOUS, length))
    return items, servers


@dataclass
class SchedulerOracleReport:
    instances: int
    gaps: list[float]

    @property
    def within(self) -> int:
        return sum(g <= 0.15 for g in self.gaps)

    @property
    def fraction_within(self) -> float:
        return self.within / self.instances if self.instances else 1.0

    def histogram(self, edges=(0.0, 0.01, 0.05, 0.10, 0.15, 0.25, 0.5)) -> list[tuple[str, int]]:
        rows = []
        for lo, hi in zip(edges, list(edges[1:]) + [float("inf")]):
            count = sum(lo <= g < hi for g in self.gaps) if lo > 0 else sum(g < hi for g in self.gaps)
            rows.append((f"[{lo:.2f}, {hi:.2f})", count))
        return rows


def scheduler_oracle(n: int = 1000, seed: int = 0, tile: int = 64) -> SchedulerOracleReport:
    """Greedy max-load relative to the exhaustive optimum on small instances."""
    rng = random.Random(seed)
    ctx = ScheduleContext(tile_size=tile, e_threshold=0.0)
    gaps = []
    for _ in range(n):
        items, servers = random_small_instance(rng, tile)
        plan = schedule(items, servers, 0.0, 0.0, ctx)
        pieces = [w for it in items for w in tile_pieces(it, tile)]
        best = exhaustive_min_max_load(pieces, servers)
        gaps.append(plan.max_load / best - 1.0)
    return SchedulerOracleReport(n, gaps)


# ------------------------------------------------------------- causal FLOPs

def enumerate_causal_pairs(q_start: int, q_end: int) -> int:
    """Count (query, key) pairs with key <= query for query rows ``[q_start, q_end)``."""
    count = 0
    for i in range(q_start, q_end):
        for j in range(0, q_end):
            if j <= i:
                count += 1
    return count


@dataclass
class FlopsReport:
    cases: int
    mismatches: list[tuple[int, int, int, int]]

    @property
    def ok(self) -> bool:
        return not self.mismatches


def flops_oracle(max_len: int = 256, step: int = 1) -> FlopsReport:
    """Check ``2 * pairs == n_q * (2 * n_kv - n_q) + n_q`` for every row range of docs up to ``max_len``.

    The right-hand side is the continuous pair work plus the diagonal, which
    is the whole of the documented gap.
    """
    bad, cases = [], 0
    for length in range(1, max_len + 1, step):
        for s in (0, length // 3, length - 1):
            if s >= length:
                continue
            pairs = enumerate_causal_pairs(s, length)
            n_q = length - s
            continuous = n_q * (2 * length - n_q)
            cases += 1
            if 2 * pairs != continuous + n_q:
                bad.append((s, length, pairs, continuous))
    return FlopsReport(cases, bad)

"""Reference placements: fixed packing, variable-length chunks, and per-document CP."""

from __future__ import annotations

import enum
import heapq
from dataclasses import dataclass, field
from typing import Sequence

from .comm import allgather_volume_cp
from .core import Chunk, ConfigError, Document, Item, Layout, ModelConfig, Segment
from .cost import CostCoefficients
from .workload import pack_fixed

UNIT_COEFF = CostCoefficients(alpha_ca=1.0, beta_linear=0.0, gamma_mem=1.0)


class Strategy(str, enum.Enum):
    FIXED = "fixed"
    VARLEN = "varlen"
    PER_DOC_CP = "per_doc_cp"


@dataclass
class BaselineAssignment:
    """Per-device outcome of a baseline placement.

    ``items`` holds the CA work each device runs locally. ``comm_bytes`` is the
    per-layer KV all-gather volume each device receives (zero without CP).
    """

    strategy: Strategy
    chunks: list[Chunk]
    items: list[list[Item]]
    per_device_flops: list[float]
    per_device_memory: list[float]
    comm_bytes: list[float]
    cp_degree: int = 1
    grouping: str = "sequential"
    kv_surcharge: list[float] = field(default_factory=list)

    @property
    def per_device_tokens(self) -> list[int]:
        return [c.total_tokens for c in self.chunks]

    @property
    def memory_divergence(self) -> float:
        tokens = self.per_device_tokens
        lo = min(tokens)
        return float("inf") if lo == 0 else max(tokens) / lo

    def flops_ratio(self) -> float:
        lo = min(self.per_device_flops)
        return float("inf") if lo == 0 else max(self.per_device_flops) / lo

    def records(self) -> list[dict]:
        out = []
        for d, its in enumerate(self.items):
            for it in its:
                out.append(
                    {
                        "doc": it.doc_id,
                        "q_range": [it.q_start, it.q_end],
                        "layout": it.layout.value,
                        "doc_length": it.doc_length,
                        "source": d,
                        "server": d,
                        "flops": None,
                        "bytes": 0,
                    }
                )
        return out


def _segment_items(chunk: Chunk, lengths: dict[int, int]) -> list[Item]:
    return [
        Item(s.doc_id, s.start, s.end, chunk.device, Layout.CONTIGUOUS, lengths.get(s.doc_id))
        for s in chunk.segments
    ]


def _finish(strategy, chunks, items, coeff, comm=None, surcharge=None, **kw) -> BaselineAssignment:
    n = len(chunks)
    surcharge = surcharge or [0.0] * n
    flops = [coeff.alpha_ca * sum(it.pair_work() for it in its) for its in items]
    memory = [coeff.gamma_mem * c.total_tokens + surcharge[d] for d, c in enumerate(chunks)]
    return BaselineAssignment(
        strategy, chunks, items, flops, memory, comm or [0.0] * n, kv_surcharge=surcharge, **kw
    )


def assign_fixed(
    documents: Sequence[Document],
    devices: int,
    tokens_per_chunk: int,
    coeff: CostCoefficients = UNIT_COEFF,
) -> BaselineAssignment:
    """Sequential fixed-size packing; every device runs its own segments' attention."""
    chunks = pack_fixed(documents, tokens_per_chunk, devices)
    lengths = {d.id: d.length for d in documents}
    items = [_segment_items(c, lengths) for c in chunks]
    return _finish(Strategy.FIXED, chunks, items, coeff)


def lpt_groups(documents: Sequence[Document], groups: int) -> list[list[Document]]:
    """Longest-processing-time assignment on ``l**2``.

    Documents go in order of decreasing ``l**2`` (lower id first on ties) to
    the group with the smallest running sum (lower index first on ties).
    """
    if groups < 1:
        raise ConfigError("need at least one group")
    order = sorted(documents, key=lambda d: (-d.length * d.length, d.id))
    heap = [(0, g) for g in range(groups)]
    out: list[list[Document]] = [[] for _ in range(groups)]
    for doc in order:
        load, g = heapq.heappop(heap)
        out[g].append(doc)
        heapq.heappush(heap, (load + doc.length * doc.length, g))
    for g in out:
        g.sort(key=lambda d: d.id)
    return out


def assign_varlen(
    documents: Sequence[Document],
    devices: int,
    coeff: CostCoefficients = UNIT_COEFF,
) -> BaselineAssignment:
    """Whole documents spread by LPT on ``l**2``; token counts are free to diverge."""
    groups = lpt_groups(documents, devices)
    chunks = [Chunk(d, tuple(Segment(doc.id, 0, doc.length) for doc in docs)) for d, docs in enumerate(groups)]
    lengths = {d.id: d.length for d in documents}
    items = [_segment_items(c, lengths) for c in chunks]
    return _finish(Strategy.VARLEN, chunks, items, coeff)


def head_tail_pieces(start: int, end: int, cp_degree: int) -> list[list[tuple[int, int]]]:
    """Cut ``[start, end)`` into ``2c`` near-equal pieces; rank ``i`` gets pieces ``i`` and ``2c-1-i``."""
    n = 2 * cp_degree
    span = end - start
    cuts = [start + span * k // n for k in range(n + 1)]
    pieces = [(cuts[k], cuts[k + 1]) for k in range(n)]
    return [[p for p in (pieces[i], pieces[n - 1 - i]) if p[0] < p[1]] for i in range(cp_degree)]


def assign_per_doc_cp(
    documents: Sequence[Document],
    devices: int,
    cp_degree: int,
    tokens_per_chunk: int | None = None,
    coeff: CostCoefficients = UNIT_COEFF,
    model: ModelConfig | None = None,
    layers: int = 1,
    grouping: str = "sequential",
) -> BaselineAssignment:
    """Per-document context parallelism inside groups of ``cp_degree`` devices.

    Documents are first grouped (sequential packing of ``cp * tokens_per_chunk``
    tokens per group, or LPT on ``l**2`` when ``grouping="lpt"``). Inside a
    group each document segment is cut into ``2c`` pieces and rank ``i`` runs
    pieces ``i`` and ``2c-1-i``. Each rank all-gathers the group's KV every
    layer, and rank ``c-1`` also keeps the aggregated KV of every document in
    the group for backward.
    """
    if cp_degree < 1:
        raise ConfigError("cp_degree must be >= 1")
    if devices % cp_degree:
        raise ConfigError(f"cp_degree {cp_degree} does not divide {devices} devices")
    n_groups = devices // cp_degree
    lengths = {d.id: d.length for d in documents}
    if grouping == "sequential":
        if tokens_per_chunk is None:
            raise ConfigError("sequential grouping needs tokens_per_chunk")
        group_chunks = pack_fixed(documents, tokens_per_chunk * cp_degree, n_groups)
        group_segments = [list(c.segments) for c in group_chunks]
    elif grouping == "lpt":
        group_segments = [[Segment(d.id, 0, d.length) for d in g] for g in lpt_groups(documents, n_groups)]
    else:
        raise ConfigError(f"unknown grouping {grouping!r}")

    size_kv = model.size_kv if model is not None else 0
    chunks, items, comm, surcharge = [], [], [], []
    for g, segs in enumerate(group_segments):
        group_tokens = sum(s.length for s in segs)
        rank_segs: list[list[Segment]] = [[] for _ in range(cp_degree)]
        for seg in segs:
            if cp_degree == 1:
                rank_segs[0].append(seg)
                continue
            for r, parts in enumerate(head_tail_pieces(seg.start, seg.end, cp_degree)):
                rank_segs[r].extend(Segment(seg.doc_id, a, b) for a, b in parts)
        for r in range(cp_degree):
            dev = g * cp_degree + r
            chunk = Chunk(dev, tuple(rank_segs[r]))
            chunks.append(chunk)
            items.append(_segment_items(chunk, lengths))
            comm.append(allgather_volume_cp(group_tokens, cp_degree, model) if model is not None and cp_degree > 1 else 0.0)
            extra = group_tokens * size_kv * layers if (r == cp_degree - 1 and cp_degree > 1) else 0.0
            surcharge.append(float(extra))
    strategy = Strategy.FIXED if cp_degree == 1 and grouping == "sequential" else Strategy.PER_DOC_CP
    return _finish(strategy, chunks, items, coeff, comm, surcharge, cp_degree=cp_degree, grouping=grouping)

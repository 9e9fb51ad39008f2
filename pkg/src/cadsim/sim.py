"""Two-resource timeline simulation of ping-pong CA dispatch across devices."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import CATask, ClusterConfig, Chunk, ConfigError
from .comm import DispatchLedger, kv_token_span  # noqa: F401
from .cost import CostCoefficients, ProfilerGrid, ca_time, ci_time


class CommMode(str, enum.Enum):
    PINGPONG = "pingpong"
    SINGLE_STREAM = "single_stream"
    SIGNAL = "signal"


@dataclass(frozen=True)
class NanoBatchLoad:
    """Per-device work of one nano-batch for a single forward layer.

    Arrays are indexed by device. ``send``/``recv`` are dispatch bytes,
    ``ret_send``/``ret_recv`` the attention outputs travelling back, and the
    ``*_msgs`` arrays count tasks for signal mode. ``exposed_s`` is extra
    time serialized before CA on the compute stream (e.g. a CP all-gather).
    """

    ci_s: np.ndarray
    ca_s: np.ndarray
    send: np.ndarray
    recv: np.ndarray
    ret_send: np.ndarray
    ret_recv: np.ndarray
    send_msgs: np.ndarray
    recv_msgs: np.ndarray
    exposed_s: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "NanoBatchLoad":
        z = lambda: np.zeros(n)  # noqa: E731
        return cls(z(), z(), z(), z(), z(), z(), z(), z(), z())

    @property
    def n_devices(self) -> int:
        return len(self.ci_s)


@dataclass
class WorkloadPlan:
    """Everything the simulator needs for one iteration on ``n`` devices."""

    nano_batches: list[NanoBatchLoad]
    tokens: np.ndarray
    memory: np.ndarray
    label: str = ""
    scheduled_comm_bytes: float = 0.0

    @property
    def n_devices(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class SimConfig:
    num_layers: int = 1
    bandwidth: float = 50 * 2**30
    latency: float = 5e-6
    backward_ratio: float = 2.0
    comm_backward_ratio: float = 2.0
    include_backward: bool = True
    mode: CommMode = CommMode.PINGPONG
    memory_capacity: float = float("inf")
    record_events: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", CommMode(self.mode))
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.bandwidth <= 0:
            raise ConfigError("bandwidth must be positive")
        if self.latency < 0 or self.backward_ratio < 0 or self.comm_backward_ratio < 0:
            raise ConfigError("latency and ratios must be >= 0")

    @classmethod
    def from_cluster(cls, cluster: ClusterConfig, num_layers: int, **kwargs) -> "SimConfig":
        return cls(
            num_layers=num_layers,
            bandwidth=cluster.interconnect_bandwidth,
            latency=cluster.message_latency,
            memory_capacity=cluster.memory_capacity * cluster.tp,
            **kwargs,
        )


@dataclass
class DeviceTimeline:
    device: int
    busy_compute_s: float
    busy_comm_s: float
    overlapped_s: float
    idle_s: float
    peak_memory: float
    completion_s: float
    events: list[tuple[float, float, str, str]] = field(default_factory=list)


@dataclass
class TimelineReport:
    iteration_s: float
    per_device: list[DeviceTimeline]
    imbalance_idle_fraction: float
    total_wire_bytes: float
    memory_divergence: float
    oom: bool = False
    label: str = ""
    ticks: int | None = None

    def to_chrome_trace(self) -> dict:
        """Chrome trace-event JSON: one process per device, one thread per resource."""
        events = []
        for dev in self.per_device:
            for start, end, resource, name in dev.events:
                events.append(
                    {
                        "name": name,
                        "ph": "X",
                        "ts": start * 1e6,
                        "dur": (end - start) * 1e6,
                        "pid": dev.device,
                        "tid": resource,
                    }
                )
        return {"traceEvents": events, "displayTimeUnit": "ms"}

    def write_chrome_trace(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_chrome_trace(), fh)


def _covered(starts: np.ndarray, ends: np.ndarray, cum: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Busy time in ``[0, t)`` for sorted disjoint intervals of one device."""
    idx = np.searchsorted(starts, t, side="right")  # intervals starting before t
    done = np.zeros_like(t)
    has = idx > 0
    last = idx[has] - 1
    done[has] = cum[last] - (ends[last] - np.minimum(ends[last], t[has]))
    return done


class _Recorder:
    def __init__(self, n: int, record: bool):
        self.n = n
        self.record = record
        self.compute: list[tuple[np.ndarray, np.ndarray, str]] = []
        self.collective: list[tuple[float, float, str]] = []

    def add_compute(self, start, end, name):
        self.compute.append((np.broadcast_to(start, (self.n,)).astype(float), end.astype(float), name))

    def add_collective(self, start, end, name):
        self.collective.append((float(start), float(end), name))


def _simulate(plan: WorkloadPlan, cfg: SimConfig, layers: int, backward: bool) -> tuple[np.ndarray, _Recorder, float]:
    n = plan.n_devices
    rec = _Recorder(n, cfg.record_events)
    compute_free = np.zeros(n)
    wire_free = 0.0
    nbs = plan.nano_batches
    ready = [np.zeros(n) for _ in nbs]  # outputs of the previous layer back home
    wire_bytes = 0.0
    signal = cfg.mode is CommMode.SIGNAL
    single = cfg.mode is CommMode.SINGLE_STREAM

    def collective(dep_end, send, recv, scale, name):
        nonlocal wire_free, compute_free, wire_bytes
        total = float(send.sum())
        if total == 0:
            return None
        wire_bytes += total * scale
        duration = cfg.latency + float(np.maximum(send, recv).max()) * scale / cfg.bandwidth
        start = max(float(np.max(dep_end)), wire_free)
        if single:
            start = max(start, float(compute_free.max()))
        end = start + duration
        wire_free = end
        if single:
            compute_free = np.full(n, end)
        rec.add_collective(start, end, name)
        return end

    phases = [(1.0, 1.0, "fwd")]
    if backward:
        phases.append((cfg.backward_ratio, cfg.comm_backward_ratio, "bwd"))
    for r, rc, tag in phases:
        for layer in range(layers):
            ci_end = []
            disp_end = []
            for k, nb in enumerate(nbs):
                start = np.maximum(compute_free, ready[k])
                end = start + nb.ci_s * r
                rec.add_compute(start, end, f"{tag}{layer} CI{k}")
                compute_free = end
                ci_end.append(end)
                send, recv = (nb.send_msgs, nb.recv_msgs) if signal else (nb.send, nb.recv)
                disp_end.append(collective(end, send, recv, rc, f"{tag}{layer} dispatch{k}"))
            for k, nb in enumerate(nbs):
                dep = ci_end[k] if disp_end[k] is None else disp_end[k]
                start = np.maximum(compute_free, dep)
                end = start + (nb.exposed_s + nb.ca_s) * r
                rec.add_compute(start, end, f"{tag}{layer} CA{k}")
                compute_free = end
                send, recv = (nb.recv_msgs, nb.send_msgs) if signal else (nb.ret_send, nb.ret_recv)
                ret = collective(end, send, recv, rc, f"{tag}{layer} return{k}")
                ready[k] = end if ret is None else np.full(n, ret)
    # a device is done when its own compute ends and every collective it joins has ended
    finish = np.maximum(compute_free, wire_free)
    return finish, rec, wire_bytes


def _device_reports(plan: WorkloadPlan, finish: np.ndarray, rec: _Recorder, iteration: float) -> list[DeviceTimeline]:
    n = plan.n_devices
    if rec.compute:
        cs = np.stack([c[0] for c in rec.compute])  # ops x devices, in issue order per device
        ce = np.stack([c[1] for c in rec.compute])
    else:
        cs = ce = np.zeros((0, n))
    coll = np.array([(a, b) for a, b, _ in rec.collective]) if rec.collective else np.zeros((0, 2))
    comm_busy = float((coll[:, 1] - coll[:, 0]).sum()) if len(coll) else 0.0
    out = []
    for d in range(n):
        s, e = cs[:, d], ce[:, d]
        dur = e - s
        busy = float(dur.sum())
        overlap = 0.0
        if len(coll) and busy > 0:
            cum = np.cumsum(dur)
            hi = _covered(s, e, cum, coll[:, 1])
            lo = _covered(s, e, cum, coll[:, 0])
            overlap = max(float((hi - lo).sum()), 0.0)
        idle = iteration - (busy + comm_busy - overlap)
        events = []
        if rec.record:
            events = [(float(a[d]), float(b[d]), "compute", name) for a, b, name in rec.compute if b[d] > a[d]]
            events += [(a, b, "wire", name) for a, b, name in rec.collective]
            events.sort()
        out.append(
            DeviceTimeline(
                device=d,
                busy_compute_s=busy,
                busy_comm_s=comm_busy,
                overlapped_s=overlap,
                idle_s=max(idle, 0.0),
                peak_memory=float(plan.memory[d]),
                completion_s=float(finish[d]),
                events=events,
            )
        )
    return out


def _report(plan: WorkloadPlan, cfg: SimConfig, layers: int, backward: bool) -> TimelineReport:
    finish, rec, wire = _simulate(plan, cfg, layers, backward)
    iteration = float(finish.max()) if len(finish) else 0.0
    devices = _device_reports(plan, finish, rec, iteration)
    avg_idle = float(np.mean([d.idle_s for d in devices])) if devices else 0.0
    tokens = plan.tokens
    divergence = float(tokens.max() / tokens.min()) if len(tokens) and tokens.min() > 0 else float("inf")
    return TimelineReport(
        iteration_s=iteration,
        per_device=devices,
        imbalance_idle_fraction=avg_idle / iteration if iteration > 0 else 0.0,
        total_wire_bytes=wire,
        memory_divergence=divergence,
        oom=bool(np.any(plan.memory > cfg.memory_capacity)),
        label=plan.label,
    )


def simulate_layer_pingpong(plan: WorkloadPlan, cfg: SimConfig) -> TimelineReport:
    """One forward layer: CI of each nano-batch overlaps the other's dispatch and CA."""
    return _report(plan, cfg, 1, False)


def simulate_iteration(plan: WorkloadPlan, cfg: SimConfig) -> TimelineReport:
    """All layers forward then backward, with per-layer ping-pong overlap."""
    return _report(plan, cfg, cfg.num_layers, cfg.include_backward)


def simulate_dp_iteration(plans: WorkloadPlan | Sequence[WorkloadPlan], cfg: SimConfig) -> TimelineReport:
    """Iteration time with a gradient barrier across replicas.

    A single plan simulates every device together, so attention dispatch may
    cross replicas. A list of plans simulates each replica on its own and
    joins them at the barrier.
    """
    if isinstance(plans, WorkloadPlan):
        return simulate_iteration(plans, cfg)
    reports = [simulate_iteration(p, cfg) for p in plans]
    iteration = max(r.iteration_s for r in reports)
    devices = []
    for r in reports:
        for d in r.per_device:
            d.idle_s += iteration - r.iteration_s
            d.device = len(devices)
            devices.append(d)
    tokens = np.concatenate([p.tokens for p in plans])
    avg_idle = float(np.mean([d.idle_s for d in devices]))
    return TimelineReport(
        iteration_s=iteration,
        per_device=devices,
        imbalance_idle_fraction=avg_idle / iteration if iteration > 0 else 0.0,
        total_wire_bytes=sum(r.total_wire_bytes for r in reports),
        memory_divergence=float(tokens.max() / tokens.min()) if tokens.min() > 0 else float("inf"),
        oom=any(r.oom for r in reports),
    )


def kv_owner_map(chunks: Sequence[Chunk]) -> dict[int, list[tuple[int, int, int]]]:
    """Per document, the ``(start, end, device)`` pieces in position order."""
    owners: dict[int, list[tuple[int, int, int]]] = {}
    for ch in chunks:
        for seg in ch.segments:
            owners.setdefault(seg.doc_id, []).append((seg.start, seg.end, ch.device))
    for pieces in owners.values():
        pieces.sort()
    return owners


def nano_batch_from_tasks(
    tasks: Sequence[CATask],
    ci_tokens: Sequence[int],
    coeff: CostCoefficients,
    cluster: ClusterConfig,
    grid: ProfilerGrid | None = None,
    exposed_s: Sequence[float] | None = None,
    kv_owners: dict[int, list[tuple[int, int, int]]] | None = None,
    size_kv: int | None = None,
) -> NanoBatchLoad:
    """Aggregate tasks into per-device CI/CA seconds and byte counts for one layer.

    Without ``kv_owners`` a migrated task's bytes all leave its home device.
    With it, only the query part leaves home; the K/V prefix is sent once per
    (document, destination) by whichever devices hold those positions, and
    positions the destination already holds cost nothing.
    """
    n = len(ci_tokens)
    nb = NanoBatchLoad.zeros(n)
    for d, tokens in enumerate(ci_tokens):
        nb.ci_s[d] = ci_time(tokens, coeff, cluster)
    if exposed_s is not None:
        nb.exposed_s[:] = exposed_s
    ledger = DispatchLedger(n, size_kv or 0, kv_owners if size_kv is not None else None)
    for t in tasks:
        nb.ca_s[t.assigned_server] += ca_time(t.item, coeff, cluster, grid)
        if not t.migrated:
            continue
        s, d = t.source_device, t.assigned_server
        nb.ret_send[d] += t.return_bytes
        nb.ret_recv[s] += t.return_bytes
        nb.send_msgs[s] += 1
        nb.recv_msgs[d] += 1
        ledger.add(t.item, s, d, t.comm_bytes)
    nb.send[:] = ledger.send
    nb.recv[:] = ledger.recv
    return nb


def chunk_tokens(chunks: Sequence[Chunk]) -> np.ndarray:
    return np.array([c.total_tokens for c in chunks], dtype=float)

"""Pipeline-parallel schedules: plain 1F1B and phase-synchronized ticks with pooled CA."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ClusterConfig, ConfigError, Item
from .cost import CostCoefficients, ca_time, ci_time
from .scheduler import ScheduleContext, schedule_pp_tick
from .sim import DeviceTimeline, TimelineReport

FWD, BWD = "F", "B"


class PPSchedule(str, enum.Enum):
    VANILLA_1F1B = "vanilla_1f1b"
    CAD_PHASE_SYNC = "cad_phase_sync"


@dataclass(frozen=True)
class Microbatch:
    """Documents (as CA items) making up one microbatch; ``tokens`` drives CI cost."""

    items: tuple[Item, ...]
    tokens: int


@dataclass(frozen=True)
class PPConfig:
    coeff: CostCoefficients
    cluster: ClusterConfig
    layers_per_stage: int = 1
    backward_ratio: float = 2.0
    comm_backward_ratio: float = 2.0
    epsilon: float = 0.0
    serve_idle_stages: bool = True
    ctx: ScheduleContext | None = None


@dataclass(frozen=True)
class Op:
    stage: int
    phase: str
    microbatch: int


def _check(stages: int, microbatches: int):
    if stages < 1:
        raise ConfigError("need at least one stage")
    if microbatches < stages:
        raise ConfigError(f"1F1B warmup needs microbatches >= stages ({microbatches} < {stages})")


def one_f_one_b_order(stages: int, microbatches: int) -> list[list[Op]]:
    """Per-stage op order: warm-up forwards, steady one-forward-one-backward, cool-down backwards."""
    _check(stages, microbatches)
    order = []
    for s in range(stages):
        warm = min(stages - s - 1, microbatches)
        ops = [Op(s, FWD, m) for m in range(warm)]
        f, b = warm, 0
        while f < microbatches:
            ops.append(Op(s, FWD, f))
            f += 1
            ops.append(Op(s, BWD, b))
            b += 1
        ops.extend(Op(s, BWD, m) for m in range(b, microbatches))
        order.append(ops)
    return order


def _dependency(op: Op, stages: int) -> tuple[int, str, int] | None:
    if op.phase == FWD:
        return (op.stage - 1, FWD, op.microbatch) if op.stage > 0 else None
    if op.stage < stages - 1:
        return (op.stage + 1, BWD, op.microbatch)
    return (op.stage, FWD, op.microbatch)


def run_event_driven(order: list[list[Op]], duration) -> dict[tuple[int, str, int], tuple[float, float]]:
    """Start/end of every op when each stage runs its list in order as soon as inputs exist."""
    stages = len(order)
    times: dict[tuple[int, str, int], tuple[float, float]] = {}
    pos = [0] * stages
    free = [0.0] * stages
    remaining = sum(len(o) for o in order)
    while remaining:
        progressed = False
        for s in range(stages):
            while pos[s] < len(order[s]):
                op = order[s][pos[s]]
                dep = _dependency(op, stages)
                if dep is not None and dep not in times:
                    break
                ready = times[dep][1] if dep is not None else 0.0
                start = max(free[s], ready)
                end = start + duration(op)
                times[(op.stage, op.phase, op.microbatch)] = (start, end)
                free[s] = end
                pos[s] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            raise RuntimeError("pipeline order deadlocks")
    return times


def one_f_one_b_ticks(stages: int, microbatches: int) -> list[list[Op]]:
    """1F1B tick table: each op lands in the tick given by its unit-time start."""
    order = one_f_one_b_order(stages, microbatches)
    times = run_event_driven(order, lambda op: 1.0)
    n_ticks = int(max(e for _, e in times.values()))
    ticks: list[list[Op]] = [[] for _ in range(n_ticks)]
    for (s, ph, m), (start, _) in times.items():
        ticks[int(start)].append(Op(s, ph, m))
    for t in ticks:
        t.sort(key=lambda op: op.stage)
    return ticks


def _phase_sync_greedy(stages: int, microbatches: int, cap_extra: int, limit: int) -> list[tuple[str, list[Op]]] | None:
    next_f = [0] * stages
    next_b = [0] * stages
    f_tick = [[-1] * microbatches for _ in range(stages)]
    b_tick = [[-1] * microbatches for _ in range(stages)]
    ticks = []
    t = 0
    while any(b < microbatches for b in next_b):
        if t >= limit:
            return None
        f_ops = []
        for s in range(stages):
            m = next_f[s]
            if m >= microbatches or m - next_b[s] >= stages - s + cap_extra:
                continue
            if s == 0 or 0 <= f_tick[s - 1][m] < t:
                f_ops.append(Op(s, FWD, m))
        if f_ops:
            for op in f_ops:
                f_tick[op.stage][op.microbatch] = t
                next_f[op.stage] += 1
            ticks.append((FWD, f_ops))
        else:
            b_ops = []
            for s in range(stages):
                m = next_b[s]
                if m >= next_f[s]:
                    continue
                dep_done = (0 <= f_tick[s][m] < t) if s == stages - 1 else (0 <= b_tick[s + 1][m] < t)
                if dep_done:
                    b_ops.append(Op(s, BWD, m))
            if not b_ops:
                raise RuntimeError("phase-synchronized table stalled")
            for op in b_ops:
                b_tick[op.stage][op.microbatch] = t
                next_b[op.stage] += 1
            ticks.append((BWD, b_ops))
        t += 1
    return ticks


def phase_sync_ticks(stages: int, microbatches: int) -> list[tuple[str, list[Op]]]:
    """Phase-synchronized tick table with as many ticks as 1F1B.

    Every tick runs a single phase on all active stages. Forwards take
    priority while a stage has fewer than ``stages - s + extra`` microbatches
    in flight; backwards that do not fit are deferred into the trailing
    backward ticks. ``extra`` grows from 0 until the table reaches the
    ``2 * (microbatches + stages - 1)`` ticks of 1F1B; all-forward-first
    always reaches it, so the search terminates.
    """
    _check(stages, microbatches)
    bound = 2 * (microbatches + stages - 1)
    for extra in range(microbatches + 1):
        ticks = _phase_sync_greedy(stages, microbatches, extra, bound)
        if ticks is not None:
            return ticks
    raise RuntimeError("no phase-synchronized table within the 1F1B tick count")


def _stage_costs(mb: Microbatch, cfg: PPConfig) -> tuple[float, float]:
    layers = cfg.layers_per_stage
    ci = ci_time(mb.tokens, cfg.coeff, cfg.cluster) * layers
    ca = sum(ca_time(it, cfg.coeff, cfg.cluster) for it in mb.items) * layers
    return ci, ca


def _report(iteration: float, busy: np.ndarray, ticks: int, memory: np.ndarray, wire: float, label: str) -> TimelineReport:
    devices = [
        DeviceTimeline(
            device=s,
            busy_compute_s=float(busy[s]),
            busy_comm_s=0.0,
            overlapped_s=0.0,
            idle_s=max(iteration - float(busy[s]), 0.0),
            peak_memory=float(memory[s]),
            completion_s=iteration,
        )
        for s in range(len(busy))
    ]
    avg_idle = float(np.mean([d.idle_s for d in devices]))
    return TimelineReport(
        iteration_s=iteration,
        per_device=devices,
        imbalance_idle_fraction=avg_idle / iteration if iteration > 0 else 0.0,
        total_wire_bytes=wire,
        memory_divergence=1.0,
        label=label,
        ticks=ticks,
    )


def _peak_inflight(stages: int, sequence: Sequence[Op]) -> np.ndarray:
    inflight = np.zeros(stages)
    peak = np.zeros(stages)
    for op in sequence:
        inflight[op.stage] += 1 if op.phase == FWD else -1
        peak[op.stage] = max(peak[op.stage], inflight[op.stage])
    return peak


def simulate_pp_iteration(
    microbatches: Sequence[Microbatch],
    stages: int,
    schedule: PPSchedule | str,
    cfg: PPConfig,
) -> TimelineReport:
    """Iteration time of one pipeline-parallel step.

    ``vanilla_1f1b`` runs each stage's 1F1B op list as soon as inputs arrive;
    every op costs its microbatch's CI plus local CA. ``cad_phase_sync`` walks
    the phase-synchronized tick table; in each tick the CA items of all
    active stages are pooled and rebalanced (over every stage when
    ``serve_idle_stages`` is set, else only over the active ones) and the
    tick lasts as long as its slowest stage.
    """
    schedule = PPSchedule(schedule)
    M = len(microbatches)
    _check(stages, M)
    costs = [_stage_costs(mb, cfg) for mb in microbatches]
    r, rc = cfg.backward_ratio, cfg.comm_backward_ratio
    gamma_tokens = [cfg.coeff.gamma_mem * cfg.layers_per_stage * mb.tokens for mb in microbatches]
    max_tokens_mem = max(gamma_tokens)

    if schedule is PPSchedule.VANILLA_1F1B:
        order = one_f_one_b_order(stages, M)

        def duration(op: Op) -> float:
            ci, ca = costs[op.microbatch]
            return (ci + ca) * (1.0 if op.phase == FWD else r)

        times = run_event_driven(order, duration)
        iteration = max(e for _, e in times.values())
        busy = np.zeros(stages)
        for (s, _, _), (a, b) in times.items():
            busy[s] += b - a
        seq = sorted((Op(s, ph, m) for (s, ph, m) in times), key=lambda op: times[(op.stage, op.phase, op.microbatch)][0])
        memory = _peak_inflight(stages, seq) * max_tokens_mem
        n_ticks = len(one_f_one_b_ticks(stages, M))
        return _report(iteration, busy, n_ticks, memory, 0.0, schedule.value)

    ctx = cfg.ctx or ScheduleContext(alpha=cfg.coeff.alpha_ca, tile_size=cfg.cluster.tile_size)
    ticks = phase_sync_ticks(stages, M)
    iteration = 0.0
    wire_total = 0.0
    busy = np.zeros(stages)
    bw = cfg.cluster.interconnect_bandwidth
    for phase, ops in ticks:
        scale = 1.0 if phase == FWD else r
        comm_scale = 1.0 if phase == FWD else rc
        servers = list(range(stages)) if cfg.serve_idle_stages else [op.stage for op in ops]
        index = {s: i for i, s in enumerate(servers)}
        per_stage = {index[op.stage]: microbatches[op.microbatch].items for op in ops}
        plan = schedule_pp_tick(per_stage, len(servers), cfg.epsilon, None, ctx)
        compute = np.zeros(len(servers))
        send = np.zeros(len(servers))
        recv = np.zeros(len(servers))
        for op in ops:
            compute[index[op.stage]] += costs[op.microbatch][0]
        for task in plan.tasks:
            compute[task.assigned_server] += ca_time(task.item, cfg.coeff, cfg.cluster) * cfg.layers_per_stage
            if task.migrated:
                send[task.source_device] += task.comm_bytes + 0.0
                recv[task.assigned_server] += task.comm_bytes
                send[task.assigned_server] += task.return_bytes
                recv[task.source_device] += task.return_bytes
        wire = np.maximum(send, recv) * cfg.layers_per_stage * comm_scale / bw
        wire_total += float(send.sum()) * cfg.layers_per_stage * comm_scale
        stage_time = np.maximum(compute * scale, wire)
        tick = float(stage_time.max())
        iteration += tick
        for s, i in index.items():
            busy[s] += compute[i] * scale
    flat = [op for _, ops in ticks for op in ops]
    memory = _peak_inflight(stages, flat) * max_tokens_mem
    return _report(iteration, busy, len(ticks), memory, wire_total, schedule.value)

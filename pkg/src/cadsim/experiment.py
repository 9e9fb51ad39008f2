"""Experiment specs, per-batch strategy comparison, sweeps, and CSV reporting."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .baselines import BaselineAssignment, assign_fixed, assign_per_doc_cp, assign_varlen
from .core import CATask, ClusterConfig, ConfigError, Document, ModelConfig
from .cost import CostCoefficients, ci_time
from .scheduler import ScheduleContext, items_from_chunks, schedule
from .sim import CommMode, NanoBatchLoad, SimConfig, TimelineReport, WorkloadPlan, kv_owner_map, nano_batch_from_tasks, simulate_iteration
from .workload import LengthDistribution, place_sequential, sample_batch, split_chunk

STRATEGIES = (
    "fixed",
    "varlen",
    "per_doc_cp",
    "wlb_ideal",
    "distca",
    "distca_signal",
    "distca_single_stream",
)
SWEEP_AXES = ("epsilon", "cp_degree", "max_doc_len", "bandwidth")


class UnknownStrategyError(ConfigError):
    pass


class InfeasibleClusterError(ConfigError):
    pass


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}; expected one of {SWEEP_AXES}")
        if not self.values:
            raise ConfigError("sweep values must be non-empty")
        object.__setattr__(self, "values", tuple(self.values))


@dataclass(frozen=True)
class ExperimentSpec:
    """One experiment: configs, strategies, batch count and an optional sweep.

    ``num_layers`` overrides the model's layer count to shorten runs.
    ``wlb_cp_degrees`` lists the CP degrees WLB-ideal may pick from (default:
    every power of two dividing the device count) and ``wlb_groupings`` the
    document groupings it combines them with. ``overlap_budget`` caps
    each device's DistCA dispatch bytes at that fraction of the compute it
    can hide behind (``None`` lets the scheduler move freely).
    """

    model: ModelConfig
    cluster: ClusterConfig
    distribution: LengthDistribution
    strategies: tuple[str, ...] = ("fixed", "wlb_ideal", "distca")
    batches: int = 30
    epsilon: float = 0.0
    tokens_per_device: int = 8192
    seed: int = 0
    sweep: SweepSpec | None = None
    num_layers: int | None = None
    e_threshold: float = 0.01
    backward_ratio: float = 2.0
    comm_backward_ratio: float = 2.0
    wlb_cp_degrees: tuple[int, ...] | None = None
    wlb_groupings: tuple[str, ...] = ("lpt", "sequential")
    overlap_budget: float | None = 1.0
    export_plans: bool = False
    traces: bool = False

    def __post_init__(self):
        object.__setattr__(self, "strategies", tuple(self.strategies))
        unknown = [s for s in self.strategies if s not in STRATEGIES]
        if unknown:
            raise UnknownStrategyError(f"unknown strategies {unknown}; expected any of {STRATEGIES}")
        if not self.strategies:
            raise ConfigError("at least one strategy is required")
        if self.batches < 1:
            raise ConfigError("batches must be >= 1")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        object.__setattr__(self, "wlb_groupings", tuple(self.wlb_groupings))
        if not self.wlb_groupings or set(self.wlb_groupings) - {"lpt", "sequential"}:
            raise ConfigError("wlb_groupings must be a non-empty subset of ['lpt', 'sequential']")
        if self.overlap_budget is not None and self.overlap_budget < 0:
            raise ConfigError("overlap_budget must be >= 0 or null")
        if self.tokens_per_device < 1:
            raise ConfigError("tokens_per_device must be >= 1")
        if self.num_layers is not None and self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.cluster.pp != 1:
            raise InfeasibleClusterError("run_experiment simulates data/context parallel layouts; pp must be 1")
        n = self.cluster.num_devices
        if n < 1:
            raise InfeasibleClusterError("cluster has no logical devices")
        if n % self.cluster.cp:
            raise InfeasibleClusterError(f"cp={self.cluster.cp} does not divide {n} devices")
        if self.wlb_cp_degrees is not None:
            object.__setattr__(self, "wlb_cp_degrees", tuple(int(c) for c in self.wlb_cp_degrees))
            bad = [c for c in self.wlb_cp_degrees if c < 1 or n % c]
            if bad:
                raise InfeasibleClusterError(f"wlb_cp_degrees {bad} do not divide {n} devices")

    @property
    def layers(self) -> int:
        return self.num_layers or self.model.num_layers

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentSpec":
        data = dict(data)
        for key in ("model", "cluster", "distribution"):
            if key not in data:
                raise ConfigError(f"spec is missing the {key!r} section")
        model = data.pop("model")
        model = ModelConfig.from_dict({"preset": model} if isinstance(model, str) else model)
        try:
            cluster = ClusterConfig.from_dict(data.pop("cluster"))
        except ConfigError as exc:
            raise InfeasibleClusterError(str(exc)) from exc
        dist = LengthDistribution.from_dict(data.pop("distribution"))
        sweep = data.pop("sweep", None)
        if sweep is not None:
            sweep = SweepSpec(sweep["axis"], tuple(sweep.get("values", ())))
        known = set(cls.__dataclass_fields__) - {"model", "cluster", "distribution", "sweep"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown spec fields: {sorted(unknown)}")
        return cls(model=model, cluster=cluster, distribution=dist, sweep=sweep, **data)

    def to_dict(self) -> dict[str, Any]:
        out = {
            "model": self.model.to_dict(),
            "cluster": self.cluster.to_dict(),
            "distribution": self.distribution.to_dict(),
        }
        for name in self.__dataclass_fields__:
            if name in out or name == "sweep":
                continue
            value = getattr(self, name)
            out[name] = list(value) if isinstance(value, tuple) else value
        out["sweep"] = None if self.sweep is None else {"axis": self.sweep.axis, "values": list(self.sweep.values)}
        return out

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(canon.encode()).hexdigest()[:12]

    def with_sweep_value(self, value) -> "ExperimentSpec":
        if self.sweep is None:
            return self
        axis = self.sweep.axis
        if axis == "epsilon":
            return replace(self, epsilon=float(value), sweep=None)
        if axis == "cp_degree":
            return replace(self, cluster=replace(self.cluster, cp=int(value), dp=1), sweep=None)
        if axis == "max_doc_len":
            return replace(self, distribution=replace(self.distribution, max_doc_len=int(value)), sweep=None)
        return replace(self, cluster=replace(self.cluster, interconnect_bandwidth=float(value)), sweep=None)


def load_spec(path) -> ExperimentSpec:
    """Read a YAML (or JSON) experiment spec. Raises OSError if unreadable."""
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return ExperimentSpec.from_dict(data)


def batch_seeds(seed: int, batches: int) -> list[int]:
    children = np.random.SeedSequence(seed).spawn(batches)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


@dataclass
class StrategyOutcome:
    strategy: str
    report: TimelineReport
    scheduled_comm_bytes: float = 0.0
    migrations: int = 0
    tolerance_met: bool = True
    cp_degree: int = 1
    plan_records: list[dict] = field(default_factory=list)


class _BatchContext:
    def __init__(self, spec: ExperimentSpec, documents: Sequence[Document]):
        self.spec = spec
        self.documents = list(documents)
        self.n = spec.cluster.num_devices
        self.coeff = CostCoefficients.from_model(spec.model)
        self.mem_per_token = self.coeff.gamma_mem * spec.layers
        self.sim = SimConfig.from_cluster(
            spec.cluster,
            spec.layers,
            backward_ratio=spec.backward_ratio,
            comm_backward_ratio=spec.comm_backward_ratio,
        )
        self.ctx = ScheduleContext.from_configs(spec.model, spec.cluster, e_threshold=spec.e_threshold)
        self.lengths = {d.id: d.length for d in self.documents}
        self.sequential = place_sequential(self.documents, self.n, spec.tokens_per_device)
        self.owners = kv_owner_map(self.sequential)
        self._distca: tuple[WorkloadPlan, list, int, bool] | None = None

    def _halves(self, chunks):
        return [split_chunk(c, 2) for c in chunks]

    def _local_plan(self, assignment: BaselineAssignment, label: str) -> WorkloadPlan:
        cluster = self.spec.cluster
        halves = self._halves(assignment.chunks)
        exposed = np.array(
            [(cluster.message_latency + b / cluster.interconnect_bandwidth) / 2 if b else 0.0 for b in assignment.comm_bytes]
        )
        nbs = []
        for k in range(2):
            chunks = [h[k] for h in halves]
            items = items_from_chunks(chunks, self.lengths)
            tasks = [CATask(it, it.home_device, it.home_device, 0, 0, 0) for it in items]
            tokens = [c.total_tokens for c in chunks]
            nbs.append(nano_batch_from_tasks(tasks, tokens, self.coeff, cluster, exposed_s=exposed))
        tokens = np.array(assignment.per_device_tokens, dtype=float)
        memory = tokens * self.mem_per_token + np.array(assignment.kv_surcharge) * self.spec.layers
        return WorkloadPlan(nbs, tokens, memory, label)

    def fixed(self) -> StrategyOutcome:
        assignment = assign_fixed(self.documents, self.n, self.spec.tokens_per_device, self.coeff)
        plan = self._local_plan(assignment, "fixed")
        return StrategyOutcome("fixed", simulate_iteration(plan, self.sim))

    def _per_doc(self, cp: int, grouping: str, label: str) -> tuple[StrategyOutcome, float]:
        assignment = assign_per_doc_cp(
            self.documents,
            self.n,
            cp,
            tokens_per_chunk=self.spec.tokens_per_device,
            coeff=self.coeff,
            model=self.spec.model,
            layers=1,
            grouping=grouping,
        )
        plan = self._local_plan(assignment, label)
        report = simulate_iteration(plan, self.sim)
        wire = float(sum(assignment.comm_bytes)) * self.spec.layers * (
            1 + (self.spec.comm_backward_ratio if self.sim.include_backward else 0)
        )
        report.total_wire_bytes += wire
        return StrategyOutcome(label, report, cp_degree=cp), wire

    def varlen(self) -> StrategyOutcome:
        assignment = assign_varlen(self.documents, self.n, self.coeff)
        plan = self._local_plan(assignment, "varlen")
        return StrategyOutcome("varlen", simulate_iteration(plan, self.sim))

    def per_doc_cp(self) -> StrategyOutcome:
        return self._per_doc(self.spec.cluster.cp, "sequential", "per_doc_cp")[0]

    def wlb_ideal(self) -> StrategyOutcome:
        degrees = self.spec.wlb_cp_degrees
        if degrees is None:
            degrees = [1 << k for k in range(self.n.bit_length()) if self.n % (1 << k) == 0]
        outcomes = [
            self._per_doc(cp, grouping, "wlb_ideal")[0]
            for grouping in self.spec.wlb_groupings
            for cp in degrees
            if not (grouping == "sequential" and cp == 1)  # that is plain fixed packing
        ]
        if not outcomes:
            raise ConfigError("wlb_ideal has no configuration to try")
        feasible = [o for o in outcomes if not o.report.oom]
        pool = feasible or outcomes
        return min(pool, key=lambda o: (o.report.iteration_s, o.cp_degree))

    def _budget(self, window_s: np.ndarray) -> np.ndarray | None:
        """Bytes each device can move while ``window_s`` of compute runs."""
        frac = self.spec.overlap_budget
        if frac is None:
            return None
        cluster = self.spec.cluster
        usable = np.maximum(frac * window_s - cluster.message_latency, 0.0)
        return usable * cluster.interconnect_bandwidth

    def _distca_plan(self):
        if self._distca is None:
            halves = self._halves(self.sequential)
            cluster = self.spec.cluster
            ci = [
                np.array([ci_time(h[k].total_tokens, self.coeff, cluster) for h in halves])
                for k in range(2)
            ]
            nbs, records, moves, met, comm = [], [], 0, True, 0.0
            ca_rate = cluster.mfu_attention * cluster.peak_flops
            for k in range(2):
                # nano-batch 0 dispatches under CI of nano-batch 1, nano-batch 1 under the
                # balanced CA of nano-batch 0 (the target, so the cap does not depend on epsilon)
                window = ci[1] if k == 0 else np.full(self.n, plan.target / ca_rate)
                budget = self._budget(window)
                chunks = [h[k] for h in halves]
                items = items_from_chunks(chunks, self.lengths)
                plan = schedule(items, self.n, self.spec.epsilon, None, self.ctx, budget=budget, kv_owners=self.owners)
                tokens = [c.total_tokens for c in chunks]
                nbs.append(
                    nano_batch_from_tasks(
                        plan.tasks, tokens, self.coeff, cluster,
                        kv_owners=self.owners, size_kv=self.spec.model.size_kv,
                    )
                )
                for rec in plan.records():
                    rec["nano_batch"] = k
                    records.append(rec)
                moves += plan.migrations
                met = met and plan.tolerance_met
                comm += plan.total_comm_bytes
            tokens = np.array([c.total_tokens for c in self.sequential], dtype=float)
            wp = WorkloadPlan(nbs, tokens, tokens * self.mem_per_token, "distca", comm)
            self._distca = (wp, records, moves, met)
        return self._distca

    def distca(self, mode: CommMode, label: str) -> StrategyOutcome:
        wp, records, moves, met = self._distca_plan()
        report = simulate_iteration(wp, replace(self.sim, mode=mode))
        report.label = label
        return StrategyOutcome(label, report, wp.scheduled_comm_bytes, moves, met, plan_records=records)

    def run(self, strategy: str) -> StrategyOutcome:
        if strategy == "fixed":
            return self.fixed()
        if strategy == "varlen":
            return self.varlen()
        if strategy == "per_doc_cp":
            return self.per_doc_cp()
        if strategy == "wlb_ideal":
            return self.wlb_ideal()
        if strategy == "distca":
            return self.distca(CommMode.PINGPONG, strategy)
        if strategy == "distca_signal":
            return self.distca(CommMode.SIGNAL, strategy)
        if strategy == "distca_single_stream":
            return self.distca(CommMode.SINGLE_STREAM, strategy)
        raise UnknownStrategyError(strategy)


def sample_documents(spec: ExperimentSpec, batch_seed: int) -> list[Document]:
    total = spec.cluster.num_devices * spec.tokens_per_device
    return sample_batch(spec.distribution, total, seed=batch_seed)


def run_batch(spec: ExperimentSpec, batch_index: int, batch_seed: int, keep_records: bool = False) -> list[StrategyOutcome]:
    ctx = _BatchContext(spec, sample_documents(spec, batch_seed))
    outcomes = []
    for strategy in spec.strategies:
        out = ctx.run(strategy)
        if not keep_records:
            out.plan_records = []
        outcomes.append(out)
    return outcomes


def _batch_job(args):
    spec, index, seed, keep = args
    return run_batch(spec, index, seed, keep)


BATCH_COLUMNS = (
    "sweep_value",
    "batch",
    "strategy",
    "iteration_s",
    "idle_fraction",
    "memory_divergence",
    "wire_bytes",
    "scheduled_comm_bytes",
    "migrations",
    "tolerance_met",
    "cp_degree",
    "oom",
)
SUMMARY_COLUMNS = (
    "sweep_axis",
    "sweep_value",
    "strategy",
    "batches",
    "mean_iteration_s",
    "mean_idle_fraction",
    "mean_memory_divergence",
    "mean_wire_bytes",
    "mean_scheduled_comm_bytes",
    "oom_batches",
)


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    batch_rows: list[dict]
    summary_rows: list[dict]
    outcomes: dict[tuple[Any, int], list[StrategyOutcome]]

    def summary_csv(self) -> str:
        return _to_csv(SUMMARY_COLUMNS, self.summary_rows)

    def batches_csv(self) -> str:
        return _to_csv(BATCH_COLUMNS, self.batch_rows)

    def table(self) -> str:
        lines = [f"{'sweep':>12} {'strategy':<22} {'iter_s':>12} {'idle':>8} {'mem_div':>8} {'wire_GB':>10} {'oom':>4}"]
        for r in self.summary_rows:
            sweep = "-" if r["sweep_value"] == "" else str(r["sweep_value"])
            lines.append(
                f"{sweep:>12} {r['strategy']:<22} {r['mean_iteration_s']:>12.6f} {r['mean_idle_fraction']:>8.4f} "
                f"{r['mean_memory_divergence']:>8.4f} {r['mean_wire_bytes'] / 2**30:>10.3f} {r['oom_batches']:>4}"
            )
        return "\n".join(lines)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _to_csv(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def run_experiment(spec: ExperimentSpec, jobs: int = 1, keep_records: bool = False) -> ExperimentResult:
    """Sample ``spec.batches`` batches, run every strategy on each, and average.

    Batches use seeds spawned from ``spec.seed``, so every sweep value sees the
    same batches. Results are merged in batch order, so ``jobs`` never
    changes the output.
    """
    values = spec.sweep.values if spec.sweep else ("",)
    seeds = batch_seeds(spec.seed, spec.batches)
    jobs_list = []
    for value in values:
        sub = spec.with_sweep_value(value) if value != "" else spec
        for b, s in enumerate(seeds):
            jobs_list.append((sub, b, s, keep_records))
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_batch_job, jobs_list))
    else:
        results = [_batch_job(j) for j in jobs_list]

    outcomes: dict[tuple[Any, int], list[StrategyOutcome]] = {}
    batch_rows = []
    idx = 0
    for value in values:
        for b in range(spec.batches):
            outs = results[idx]
            idx += 1
            outcomes[(value, b)] = outs
            for o in outs:
                batch_rows.append(
                    {
                        "sweep_value": value,
                        "batch": b,
                        "strategy": o.strategy,
                        "iteration_s": o.report.iteration_s,
                        "idle_fraction": o.report.imbalance_idle_fraction,
                        "memory_divergence": o.report.memory_divergence,
                        "wire_bytes": float(o.report.total_wire_bytes),
                        "scheduled_comm_bytes": float(o.scheduled_comm_bytes),
                        "migrations": o.migrations,
                        "tolerance_met": o.tolerance_met,
                        "cp_degree": o.cp_degree,
                        "oom": o.report.oom,
                    }
                )
    summary = []
    axis = spec.sweep.axis if spec.sweep else ""
    for value in values:
        for strategy in spec.strategies:
            rows = [r for r in batch_rows if r["sweep_value"] == value and r["strategy"] == strategy]
            summary.append(
                {
                    "sweep_axis": axis,
                    "sweep_value": value,
                    "strategy": strategy,
                    "batches": len(rows),
                    "mean_iteration_s": float(np.mean([r["iteration_s"] for r in rows])),
                    "mean_idle_fraction": float(np.mean([r["idle_fraction"] for r in rows])),
                    "mean_memory_divergence": float(np.mean([r["memory_divergence"] for r in rows])),
                    "mean_wire_bytes": float(np.mean([r["wire_bytes"] for r in rows])),
                    "mean_scheduled_comm_bytes": float(np.mean([r["scheduled_comm_bytes"] for r in rows])),
                    "oom_batches": sum(1 for r in rows if r["oom"]),
                }
            )
    return ExperimentResult(spec, batch_rows, summary, outcomes)


def write_outputs(result: ExperimentResult, out_root) -> Path:
    """Write spec copy, CSVs, and optional plan exports/traces under ``out_root/<spec hash>``."""
    spec = result.spec
    out = Path(out_root) / spec.digest()
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.yaml").write_text(yaml.safe_dump(spec.to_dict(), sort_keys=True))
    (out / "summary.csv").write_text(result.summary_csv())
    (out / "batches.csv").write_text(result.batches_csv())
    if spec.export_plans:
        plans = out / "plans"
        plans.mkdir(exist_ok=True)
        for (value, b), outs in sorted(result.outcomes.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
            for o in outs:
                if not o.plan_records:
                    continue
                tag = f"_{value}" if value != "" else ""
                path = plans / f"batch{b:03d}{tag}_{o.strategy}.jsonl"
                with open(path, "w") as fh:
                    for rec in o.plan_records:
                        fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if spec.traces:
        traces = out / "traces"
        traces.mkdir(exist_ok=True)
        ctx = _BatchContext(spec.with_sweep_value(spec.sweep.values[0]) if spec.sweep else spec,
                            sample_documents(spec, batch_seeds(spec.seed, 1)[0]))
        ctx.sim = replace(ctx.sim, record_events=True)
        for strategy in spec.strategies:
            report = ctx.run(strategy).report
            report.write_chrome_trace(traces / f"batch000_{strategy}.json")
    return out


def output_root(cli_value: str | None) -> str:
    return os.environ.get("CADSIM_OUT") or cli_value or "cadsim_out"

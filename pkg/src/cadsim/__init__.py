"""cadsim: a simulator for disaggregating core attention from the rest of a transformer layer."""

from .comm import CommQuery, DispatchLedger, shard_count_upper_bound, v_min_comm
from .core import (
    CATask,
    Chunk,
    ClusterConfig,
    ConfigError,
    Document,
    DomainError,
    Item,
    Layout,
    ModelConfig,
    Segment,
)
from .cost import CostCoefficients, ProfilerGrid, ca_flops, ca_time, ci_time
from .experiment import ExperimentSpec, load_spec, run_experiment
from .scheduler import ScheduleContext, SchedulePlan, schedule
from .sim import CommMode, SimConfig, TimelineReport, simulate_iteration
from .workload import LengthDistribution, pack_fixed, sample_batch

__version__ = "0.1.0"

__all__ = [
    "CATask",
    "Chunk",
    "ClusterConfig",
    "CommMode",
    "CommQuery",
    "ConfigError",
    "CostCoefficients",
    "DispatchLedger",
    "Document",
    "DomainError",
    "ExperimentSpec",
    "Item",
    "Layout",
    "LengthDistribution",
    "ModelConfig",
    "ProfilerGrid",
    "ScheduleContext",
    "SchedulePlan",
    "Segment",
    "SimConfig",
    "TimelineReport",
    "ca_flops",
    "ca_time",
    "ci_time",
    "load_spec",
    "pack_fixed",
    "run_experiment",
    "sample_batch",
    "schedule",
    "shard_count_upper_bound",
    "simulate_iteration",
    "v_min_comm",
]

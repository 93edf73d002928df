"""Analytic step-time model for pipelined model parallelism plus ring all-reduce.

Timing model
------------
A training step feeds ``b`` samples to each of the ``m`` cluster devices,
i.e. ``b * m`` samples, streamed through the partition pipeline as ``m``
micro-batches of ``b`` samples. With delayed gradients every stage is busy
on a different micro-batch, so in steady state the pipeline advances one
micro-batch per *tick*:

    tick    = max_j(load_j * b / capacity_j) + allreduce      (synchronous)
    tick    = max(max_j(load_j * b / capacity_j), allreduce)  (asynchronous)
    step    = m * tick
    epoch   = ceil(V / (b * m)) * step

Pipeline fill and drain are ignored. Weights are updated once per tick, so
each tick carries one ring all-reduce of the trainable parameters.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

from .allocator import Allocation, ClusterSpec, device_loads
from .errors import InfeasibleInstanceError, InvalidClusterError
from .model_graph import PartitionPlan

SYNC_MODES = ("synchronous", "asynchronous")


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 6
    dataset_size: int = 789
    epochs: int = 50
    sync_mode: str = "synchronous"
    bytes_per_param: float = 4.0
    # E_1 / E_m: epochs-to-converge ratio, supplied by the user
    epoch_ratio: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.dataset_size < self.batch_size:
            raise ValueError("dataset_size must be at least batch_size")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.sync_mode not in SYNC_MODES:
            raise ValueError(f"sync_mode must be one of {SYNC_MODES}")
        if not self.bytes_per_param > 0 or not self.epoch_ratio > 0:
            raise ValueError("bytes_per_param and epoch_ratio must be positive")


@dataclass(frozen=True)
class StepBreakdown:
    per_device_compute_time: tuple
    compute_time: float
    allreduce_time: float
    step_time: float


@dataclass(frozen=True)
class SimReport:
    num_devices: int
    step_time: float
    microbatch_time: float
    steps_per_epoch: int
    epoch_time: float
    total_time: float
    epochs: int
    per_device_compute_time: tuple
    allreduce_time: float
    speedup_vs_single: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_device_compute_time"] = list(self.per_device_compute_time)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimReport":
        d = dict(d)
        d["per_device_compute_time"] = tuple(d["per_device_compute_time"])
        return cls(**d)


def ring_allreduce_time(param_bytes: float, cluster: ClusterSpec) -> float:
    """Reduce-scatter plus all-gather: 2(m-1) hops, each moving param_bytes/m."""
    m = len(cluster)
    if m == 1:
        return 0.0
    bandwidth = min(d.link_bandwidth for d in cluster.devices)
    if not bandwidth > 0:
        raise InvalidClusterError("ring all-reduce needs positive link bandwidth")
    latency = max(d.link_latency for d in cluster.devices)
    hops = 2 * (m - 1)
    return hops * (param_bytes / m) / bandwidth + hops * latency


def step_time(plan: PartitionPlan, alloc: Allocation, cluster: ClusterSpec, cfg: TrainingConfig) -> StepBreakdown:
    """Time for the pipeline to advance one micro-batch of ``cfg.batch_size`` samples."""
    caps = cluster.capacities
    if len(alloc.genes) != len(plan):
        raise ValueError("allocation and plan disagree on the number of partitions")
    if not alloc.feasible:
        raise InfeasibleInstanceError("allocation violates device capacities")
    if any(not 0 <= g < len(caps) for g in alloc.genes):
        raise ValueError("allocation refers to a device outside the cluster")
    loads = device_loads(alloc.genes, plan.loads, len(caps))
    per_device = tuple(l * cfg.batch_size / d for l, d in zip(loads, caps))
    compute = max(per_device)
    comm = ring_allreduce_time(plan.param_count * cfg.bytes_per_param, cluster)
    if cfg.sync_mode == "synchronous":
        tick = compute + comm
    else:
        tick = max(compute, comm)
    return StepBreakdown(per_device, compute, comm, tick)


def speedup(ts: float, tp: float) -> float:
    if not (ts > 0 and tp > 0):
        raise ValueError("speedup needs positive times")
    return ts / tp


def steps_per_epoch(cfg: TrainingConfig, m: int) -> int:
    return math.ceil(cfg.dataset_size / (cfg.batch_size * m))


def single_device_total_time(plan: PartitionPlan, cluster: ClusterSpec, cfg: TrainingConfig) -> float:
    """Whole model on the fastest device of ``cluster``, no communication."""
    fastest = max(d.capacity for d in cluster.devices)
    tick = plan.total_load * cfg.batch_size / fastest
    return steps_per_epoch(cfg, 1) * tick * cfg.epochs


def simulate(plan: PartitionPlan, alloc: Allocation, cluster: ClusterSpec, cfg: TrainingConfig) -> SimReport:
    m = len(cluster)
    breakdown = step_time(plan, alloc, cluster, cfg)
    step = m * breakdown.step_time
    n_steps = steps_per_epoch(cfg, m)
    epoch = n_steps * step
    total = epoch * cfg.epochs
    baseline = single_device_total_time(plan, cluster, cfg)
    if total > 0 and baseline > 0:
        # T_1/T_m * TS_1/TS_m, times the user-supplied E_1/E_m
        s = speedup(baseline, total) * cfg.epoch_ratio
    else:
        s = 1.0
    return SimReport(
        num_devices=m,
        step_time=step,
        microbatch_time=breakdown.step_time,
        steps_per_epoch=n_steps,
        epoch_time=epoch,
        total_time=total,
        epochs=cfg.epochs,
        per_device_compute_time=breakdown.per_device_compute_time,
        allreduce_time=breakdown.allreduce_time,
        speedup_vs_single=s,
    )

"""Planner and simulator for hybrid model- and data-parallel training."""

from .allocator import (
    Allocation,
    ClusterSpec,
    Device,
    GaParams,
    brute_force_allocate,
    gabra_solve,
    profit_matrix,
    validate_allocation,
)
from .cli_io import (
    PipelineOptions,
    emit_report,
    parse_cluster_spec,
    parse_model_spec,
    parse_report,
    run_pipeline,
    sweep,
    validate_plan_document,
)
from .errors import (
    DivergenceError,
    HybridPlanError,
    InfeasibleInstanceError,
    InstanceTooLargeError,
    InvalidClusterError,
    InvalidPlanError,
    InvalidSpecError,
    NumericError,
    SchemaError,
)
from .grad_check import ShardedDataset, TinyNet, full_gradient, sharded_gradient
from .model_graph import LayerSpec, NetworkSpec, PartitionPlan, PartitionPolicy, layer_cost, partition_network
from .simulator import SimReport, TrainingConfig, ring_allreduce_time, simulate, speedup

__version__ = "0.1.0"

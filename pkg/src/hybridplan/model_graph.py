"""Layer graphs, per-layer compute cost and heavy-layer partitioning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

from .errors import InvalidPlanError, InvalidSpecError

LAYER_KINDS = ("conv3d", "batchnorm", "relu", "pool", "attention", "dense", "softmax", "other")

# MACs per output element for element-wise layers.
ELEMENTWISE_COST = {"batchnorm": 2, "relu": 1, "pool": 1, "softmax": 2, "other": 1}

# Fields a kind cannot be costed without.
REQUIRED_FIELDS = {
    "conv3d": ("in_channels", "out_channels", "spatial", "kernel"),
    "attention": ("in_channels", "out_channels", "spatial"),
    "dense": ("in_channels", "out_channels"),
    "batchnorm": ("out_channels", "spatial"),
    "relu": ("out_channels", "spatial"),
    "pool": ("out_channels", "spatial"),
    "softmax": ("out_channels", "spatial"),
    "other": (),
}

ComputeCost = int


def _positive_triple(name, value):
    if value is None:
        return None
    try:
        triple = tuple(int(v) for v in value)
    except TypeError:
        raise InvalidSpecError(f"{name} must be a triple of positive integers") from None
    if len(triple) != 3 or any(v <= 0 for v in triple):
        raise InvalidSpecError(f"{name} must be a triple of positive integers, got {value!r}")
    return triple


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential network.

    ``spatial`` is the (T, H, W) extent of the layer output and ``kernel`` the
    (K_T, K_H, K_W) filter size. Channel and shape fields are optional for
    kinds that do not need them (see ``REQUIRED_FIELDS``).
    """

    index: int
    kind: str
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None
    spatial: Optional[tuple] = None
    kernel: Optional[tuple] = None
    param_count: int = 0
    name: str = ""
    block: Optional[str] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InvalidSpecError(f"layer {self.index}: unknown kind {self.kind!r}")
        if int(self.index) < 1:
            raise InvalidSpecError(f"layer index must be >= 1, got {self.index}")
        object.__setattr__(self, "spatial", _positive_triple("spatial", self.spatial))
        object.__setattr__(self, "kernel", _positive_triple("kernel", self.kernel))
        for name in ("in_channels", "out_channels"):
            value = getattr(self, name)
            if value is not None and int(value) <= 0:
                raise InvalidSpecError(f"layer {self.index}: {name} must be positive, got {value}")
        if self.param_count < 0:
            raise InvalidSpecError(f"layer {self.index}: param_count must be non-negative")
        missing = [f for f in REQUIRED_FIELDS[self.kind] if getattr(self, f) is None]
        if missing:
            raise InvalidSpecError(
                f"layer {self.index} ({self.kind}) is missing required field(s): {', '.join(missing)}"
            )

    @property
    def voxels(self) -> int:
        return math.prod(self.spatial) if self.spatial else 1


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise InvalidSpecError(f"network {self.name!r} has no layers")
        for expected, layer in enumerate(layers, start=1):
            if layer.index != expected:
                raise InvalidSpecError(
                    f"network {self.name!r}: layer indices must run 1..{len(layers)} in order, "
                    f"found {layer.index} at position {expected}"
                )

    def __len__(self):
        return len(self.layers)

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)


def layer_cost(layer: LayerSpec) -> ComputeCost:
    """Multiply-accumulate count of one forward pass through ``layer`` for one sample."""
    kind = layer.kind
    if kind == "conv3d":
        # C_o * C_1 * T * H * W * K_T * K_H * K_W
        return layer.out_channels * layer.in_channels * layer.voxels * math.prod(layer.kernel)
    if kind == "dense":
        return layer.in_channels * layer.out_channels
    if kind == "attention":
        tokens = layer.voxels
        c_in, c_key = layer.in_channels, layer.out_channels
        projections = 3 * tokens * c_in * c_key
        scores = tokens * tokens * c_key
        weighted_sum = tokens * tokens * c_key
        output = tokens * c_key * c_in
        return projections + scores + weighted_sum + output
    if kind == "other" and (layer.out_channels is None or layer.spatial is None):
        return 0
    return ELEMENTWISE_COST[kind] * layer.voxels * layer.out_channels


def network_costs(net: NetworkSpec) -> list:
    return [layer_cost(layer) for layer in net.layers]


@dataclass(frozen=True)
class PartitionPolicy:
    heavy_threshold_alpha: float = 1.0
    max_merge_load: Optional[float] = None

    def __post_init__(self):
        if not self.heavy_threshold_alpha > 0:
            raise InvalidSpecError("heavy_threshold_alpha must be positive")
        if self.max_merge_load is not None and not self.max_merge_load > 0:
            raise InvalidSpecError("max_merge_load must be positive when set")


@dataclass(frozen=True)
class PartitionPlan:
    """Contiguous, 1-based inclusive layer ranges and their summed costs."""

    partitions: tuple
    loads: tuple
    params: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "partitions", tuple((int(a), int(b)) for a, b in self.partitions))
        object.__setattr__(self, "loads", tuple(self.loads))
        params = tuple(self.params) if self.params else (0,) * len(self.partitions)
        object.__setattr__(self, "params", params)
        if not self.partitions:
            raise InvalidPlanError("a partition plan needs at least one partition")
        if len(self.loads) != len(self.partitions) or len(self.params) != len(self.partitions):
            raise InvalidPlanError("loads and params must have one entry per partition")

    def __len__(self):
        return len(self.partitions)

    @property
    def total_load(self):
        return sum(self.loads)

    @property
    def param_count(self) -> int:
        return sum(self.params)

    def check_coverage(self, num_layers: int) -> None:
        next_start = 1
        for start, end in self.partitions:
            if start != next_start or end < start:
                raise InvalidPlanError(
                    f"partition ({start}, {end}) breaks contiguity; expected a range starting at {next_start}"
                )
            next_start = end + 1
        if next_start != num_layers + 1:
            raise InvalidPlanError(f"partitions cover layers 1..{next_start - 1}, network has {num_layers}")


def heavy_mask(costs: Sequence[int], alpha: float = 1.0) -> list:
    """Flag layers whose cost is at least ``alpha`` times the mean cost.

    Compared in exact rational arithmetic so that scaling all costs by a
    common factor never flips a decision.
    """
    total = sum(costs)
    q = len(costs)
    threshold = Fraction(alpha) * total
    return [Fraction(c) * q >= threshold for c in costs]


def partition_costs(costs: Sequence[int], policy: PartitionPolicy = PartitionPolicy()) -> list:
    """Split a cost sequence into inclusive 1-based ranges (see ``partition_network``)."""
    if not costs:
        raise InvalidSpecError("cannot partition an empty network")
    heavy = heavy_mask(costs, policy.heavy_threshold_alpha)
    cap = policy.max_merge_load
    ranges = []
    run_start = None
    run_load = 0
    for pos, (cost, is_heavy) in enumerate(zip(costs, heavy), start=1):
        if is_heavy:
            if run_start is not None:
                ranges.append((run_start, pos - 1))
                run_start = None
            ranges.append((pos, pos))
            continue
        if run_start is not None and cap is not None and run_load + cost > cap:
            ranges.append((run_start, pos - 1))
            run_start = None
        if run_start is None:
            run_start, run_load = pos, 0
        run_load += cost
    if run_start is not None:
        ranges.append((run_start, len(costs)))
    return ranges


def partition_network(net: NetworkSpec, policy: PartitionPolicy = PartitionPolicy()) -> PartitionPlan:
    """Heavy layers become singleton partitions; each maximal run of light
    layers between them is merged into one partition, optionally split so
    no merged run exceeds ``policy.max_merge_load``."""
    costs = network_costs(net)
    ranges = partition_costs(costs, policy)
    loads = tuple(sum(costs[a - 1 : b]) for a, b in ranges)
    params = tuple(sum(layer.param_count for layer in net.layers[a - 1 : b]) for a, b in ranges)
    return PartitionPlan(partitions=tuple(ranges), loads=loads, params=params)


def partition_loads(plan: PartitionPlan, net: NetworkSpec) -> list:
    plan.check_coverage(len(net))
    costs = network_costs(net)
    return [sum(costs[a - 1 : b]) for a, b in plan.partitions]

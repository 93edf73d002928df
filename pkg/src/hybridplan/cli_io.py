"""Spec-file parsing, end-to-end orchestration and report rendering.

Model and cluster spec files are YAML or JSON documents (JSON is read as
YAML, which keeps line numbers available for error messages). Plan
documents and structured reports are written as sorted, indented JSON so
repeated runs produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
import yaml

from . import allocator as alloc_mod
from .allocator import ClusterSpec, Device, GaParams, gabra_solve
from .errors import InfeasibleInstanceError, InvalidPlanError, InvalidSpecError, SchemaError
from .grad_check import (
    PipelineState,
    ShardedDataset,
    TinyNet,
    ToyConfig,
    delayed_gradient_step,
    finite_diff_gradient,
    full_gradient,
    relative_error,
    sgd_step,
    sharded_gradient,
    train_toy,
)
from .model_graph import (
    LAYER_KINDS,
    REQUIRED_FIELDS,
    LayerSpec,
    NetworkSpec,
    PartitionPlan,
    PartitionPolicy,
    heavy_mask,
    network_costs,
    partition_network,
)
from .simulator import SimReport, TrainingConfig, simulate, speedup
from .zoo import network_to_dict

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
REPORT_FORMATS = ("table", "structured")


@dataclass(frozen=True)
class Violation:
    path: str
    message: str
    line: Optional[int] = None

    def __str__(self):
        where = f"line {self.line}: " if self.line else ""
        return f"{where}{self.path}: {self.message}"


class _Positions:
    """Maps a key path such as ("layers", 3, "kernel") to a 1-based line."""

    def __init__(self, text):
        try:
            self.root = yaml.compose(text)
        except yaml.YAMLError:
            self.root = None

    def line(self, path):
        node, best = self.root, None
        for key in path:
            if node is None:
                break
            best = node.start_mark.line + 1
            if isinstance(node, yaml.MappingNode):
                nxt = None
                for k, v in node.value:
                    if k.value == key:
                        best = k.start_mark.line + 1
                        nxt = v
                        break
                node = nxt
            elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
                node = node.value[key]
            else:
                node = None
        if node is not None:
            best = node.start_mark.line + 1
        return best


def _path_str(path):
    out = ""
    for key in path:
        out += f"[{key}]" if isinstance(key, int) else (f".{key}" if out else str(key))
    return out or "<document>"


class _Checker:
    def __init__(self, text):
        self.positions = _Positions(text)
        self.violations = []

    def fail(self, path, message):
        self.violations.append(Violation(_path_str(path), message, self.positions.line(path)))

    def int_field(self, obj, key, path, minimum=1, required=False):
        if key not in obj:
            if required:
                self.fail(path, f"missing required field {key!r}")
            return None
        value = obj[key]
        if isinstance(value, bool) or not isinstance(value, int):
            self.fail(path + (key,), f"must be an integer, got {value!r}")
            return None
        if value < minimum:
            self.fail(path + (key,), f"must be >= {minimum}, got {value}")
            return None
        return value

    def number_field(self, obj, key, path, positive=True, required=False, default=None):
        if key not in obj:
            if required:
                self.fail(path, f"missing required field {key!r}")
            return default
        value = obj[key]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(path + (key,), f"must be a number, got {value!r}")
            return default
        if (positive and not value > 0) or (not positive and value < 0):
            self.fail(path + (key,), f"must be {'positive' if positive else 'non-negative'}, got {value}")
            return default
        return float(value)

    def triple(self, obj, key, path):
        if key not in obj:
            return None
        value = obj[key]
        if (
            not isinstance(value, list)
            or len(value) != 3
            or any(isinstance(v, bool) or not isinstance(v, int) or v <= 0 for v in value)
        ):
            self.fail(path + (key,), f"must be a list of three positive integers, got {value!r}")
            return None
        return tuple(value)

    def raise_if_failed(self):
        if self.violations:
            raise SchemaError(self.violations)


def _load_document(path):
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise SchemaError([Violation("<document>", f"not valid YAML/JSON: {exc}", line)]) from None
    return text, data


_LAYER_KEYS = {"index", "kind", "in_channels", "out_channels", "spatial", "kernel", "param_count", "name", "block"}


def network_from_data(data, text="") -> NetworkSpec:
    chk = _Checker(text)
    if not isinstance(data, dict):
        chk.fail((), "top level must be a mapping with 'name' and 'layers'")
        chk.raise_if_failed()
    name = data.get("name")
    if not isinstance(name, str) or not name:
        chk.fail(("name",) if "name" in data else (), "missing or empty network name")
    layers_raw = data.get("layers")
    if not isinstance(layers_raw, list) or not layers_raw:
        chk.fail(("layers",) if "layers" in data else (), "layers must be a non-empty list")
        chk.raise_if_failed()

    layers, seen = [], {}
    for pos, raw in enumerate(layers_raw):
        path = ("layers", pos)
        if not isinstance(raw, dict):
            chk.fail(path, "each layer must be a mapping")
            continue
        for key in sorted(set(raw) - _LAYER_KEYS):
            chk.fail(path + (key,), "unknown field")
        index = chk.int_field(raw, "index", path, required=True)
        kind = raw.get("kind")
        if kind not in LAYER_KINDS:
            chk.fail(path + ("kind",) if "kind" in raw else path, f"kind must be one of {', '.join(LAYER_KINDS)}")
            kind = None
        fields = {
            "in_channels": chk.int_field(raw, "in_channels", path),
            "out_channels": chk.int_field(raw, "out_channels", path),
            "spatial": chk.triple(raw, "spatial", path),
            "kernel": chk.triple(raw, "kernel", path),
        }
        param_count = chk.int_field(raw, "param_count", path, minimum=0)
        if index is not None:
            if index in seen:
                chk.fail(path + ("index",), f"duplicate layer index {index} (first used by layers[{seen[index]}])")
            else:
                seen[index] = pos
            if index != pos + 1:
                chk.fail(path + ("index",), f"indices must run 1..Q in order; expected {pos + 1}, got {index}")
        if kind is not None:
            for req in REQUIRED_FIELDS[kind]:
                if fields[req] is None and req not in raw:
                    chk.fail(path, f"{kind} layer is missing required field {req!r}")
        for key in ("name", "block"):
            if key in raw and not isinstance(raw[key], str):
                chk.fail(path + (key,), "must be a string")
        if index is not None and kind is not None:
            layers.append(
                dict(
                    index=index,
                    kind=kind,
                    param_count=param_count or 0,
                    name=raw.get("name", "") if isinstance(raw.get("name", ""), str) else "",
                    block=raw.get("block") if isinstance(raw.get("block"), str) else None,
                    **fields,
                )
            )
    chk.raise_if_failed()
    try:
        return NetworkSpec(name=name, layers=tuple(LayerSpec(**f) for f in layers))
    except InvalidSpecError as exc:
        raise SchemaError([Violation("layers", str(exc), chk.positions.line(("layers",)))]) from None


def parse_model_spec(path) -> NetworkSpec:
    text, data = _load_document(path)
    return network_from_data(data, text)


@dataclass(frozen=True)
class ClusterConfig:
    cluster: ClusterSpec
    name: str = ""
    step_budget: Union[None, float, str] = None
    ga: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)


_GA_KEYS = {"seed": int, "population_size": int, "t_max": int, "crossover_prob": float, "mutation_prob": float}
_TRAINING_KEYS = {"batch_size": int, "dataset_size": int, "epochs": int, "sync_mode": str, "bytes_per_param": float}


def cluster_from_data(data, text="") -> ClusterConfig:
    chk = _Checker(text)
    if not isinstance(data, dict):
        chk.fail((), "top level must be a mapping with a 'devices' list")
        chk.raise_if_failed()
    devices_raw = data.get("devices")
    if not isinstance(devices_raw, list) or not devices_raw:
        chk.fail(("devices",) if "devices" in data else (), "devices must be a non-empty list")
        chk.raise_if_failed()
    devices, ids = [], set()
    for pos, raw in enumerate(devices_raw):
        path = ("devices", pos)
        if not isinstance(raw, dict):
            chk.fail(path, "each device must be a mapping")
            continue
        dev_id = raw.get("id", f"dev{pos}")
        if not isinstance(dev_id, (str, int)) or isinstance(dev_id, bool):
            chk.fail(path + ("id",), "device id must be a string")
        dev_id = str(dev_id)
        if dev_id in ids:
            chk.fail(path + ("id",), f"duplicate device id {dev_id!r}")
        ids.add(dev_id)
        capacity = chk.number_field(raw, "capacity", path, required=True)
        bandwidth = chk.number_field(raw, "bandwidth", path, default=float("inf"))
        latency = chk.number_field(raw, "latency", path, positive=False, default=0.0)
        if capacity is not None:
            devices.append(Device(dev_id, capacity, bandwidth, latency))

    budget = data.get("step_budget")
    if budget is not None and budget != "auto":
        budget = chk.number_field(data, "step_budget", ())

    sections = {}
    for section, keys in (("ga", _GA_KEYS), ("training", _TRAINING_KEYS)):
        raw = data.get(section, {})
        if not isinstance(raw, dict):
            chk.fail((section,), "must be a mapping")
            continue
        for key in sorted(set(raw) - set(keys)):
            chk.fail((section, key), "unknown field")
        for key, typ in keys.items():
            if key in raw and (isinstance(raw[key], bool) or not isinstance(raw[key], (int, float) if typ is float else typ)):
                chk.fail((section, key), f"must be of type {typ.__name__}")
        sections[section] = {k: v for k, v in raw.items() if k in keys}
    if "ga" in data and "seed" not in sections.get("ga", {"seed": 0}):
        chk.fail(("ga",), "a ga section must pin the seed")
    chk.raise_if_failed()
    return ClusterConfig(
        cluster=ClusterSpec(tuple(devices)),
        name=str(data.get("name", "")),
        step_budget=budget,
        ga=sections.get("ga", {}),
        training=sections.get("training", {}),
    )


def parse_cluster_spec(path) -> ClusterConfig:
    text, data = _load_document(path)
    return cluster_from_data(data, text)


def network_digest(net: NetworkSpec) -> str:
    canon = json.dumps(network_to_dict(net), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


@dataclass
class PipelineOptions:
    """Knobs for ``run_pipeline``; ``None`` means take the spec file's value, then the default."""

    seed: Optional[int] = None
    alpha: float = 1.0
    max_merge_load: Optional[float] = None
    population_size: Optional[int] = None
    t_max: Optional[int] = None
    sync_mode: Optional[str] = None
    batch_size: Optional[int] = None
    dataset_size: Optional[int] = None
    epochs: Optional[int] = None
    step_budget: Union[None, float, str] = None
    inverse_profit: bool = False
    require_all_devices: bool = False


def resolve_ga_params(cfg: ClusterConfig, opts: PipelineOptions) -> GaParams:
    ga = dict(cfg.ga)
    for key, value in (("seed", opts.seed), ("population_size", opts.population_size), ("t_max", opts.t_max)):
        if value is not None:
            ga[key] = value
    return GaParams(**ga, inverse_profit=opts.inverse_profit, require_all_devices=opts.require_all_devices)


def resolve_training(cfg: ClusterConfig, opts: PipelineOptions) -> TrainingConfig:
    tr = dict(cfg.training)
    for key in ("batch_size", "dataset_size", "epochs", "sync_mode"):
        value = getattr(opts, key)
        if value is not None:
            tr[key] = value
    return TrainingConfig(**tr)


def knapsack_capacities(loads, cluster: ClusterSpec, budget):
    """Per-step work capacities: raw device capacities, or throughput times a step budget."""
    throughputs = cluster.capacities
    if budget is None:
        return list(throughputs), None
    if budget == "auto":
        budget = alloc_mod.min_feasible_budget(loads, throughputs)
    return alloc_mod.budget_capacities(throughputs, float(budget)), float(budget)


def allocate_plan(plan: PartitionPlan, cluster: ClusterSpec, params: GaParams, budget=None):
    caps, used_budget = knapsack_capacities(plan.loads, cluster, budget)
    ids = [d.id for d in cluster.devices]
    try:
        allocation = gabra_solve(plan.loads, caps, params)
    except InfeasibleInstanceError as exc:
        raise InfeasibleInstanceError(str(exc), alloc_mod.diagnose_infeasible(plan.loads, caps, ids)) from None
    return allocation, caps, used_budget


def _cluster_dict(cluster):
    return [
        {"id": d.id, "capacity": d.capacity, "bandwidth": _finite_or_none(d.link_bandwidth), "latency": d.link_latency}
        for d in cluster.devices
    ]


def _finite_or_none(x):
    return x if np.isfinite(x) else None


def build_plan_document(net, policy, plan, cluster, caps, budget, allocation, params, training, report) -> dict:
    ids = [d.id for d in cluster.devices]
    return {
        "schema_version": SCHEMA_VERSION,
        "network": {"name": net.name, "num_layers": len(net), "digest": network_digest(net)},
        "partition_policy": {"alpha": policy.heavy_threshold_alpha, "max_merge_load": policy.max_merge_load},
        "partitions": [
            {"layers": [a, b], "load": load, "params": params_}
            for (a, b), load, params_ in zip(plan.partitions, plan.loads, plan.params)
        ],
        "cluster": {"devices": _cluster_dict(cluster), "step_budget": budget},
        "allocation": {
            "genes": list(allocation.genes),
            "devices": [ids[g] for g in allocation.genes],
            "knapsack_capacities": list(caps),
            "per_device_load": list(allocation.per_device_load),
            "profit": allocation.profit,
            "feasible": allocation.feasible,
        },
        "ga": asdict(params),
        "training": asdict(training) if training is not None else None,
        "simulation": report.to_dict() if report is not None else None,
    }


def validate_plan_document(doc: dict, net: Optional[NetworkSpec] = None) -> list:
    """Re-derive coverage, loads, capacity feasibility and profit; returns a list of problems."""
    problems = []
    if doc.get("schema_version") != SCHEMA_VERSION:
        problems.append(f"unsupported schema_version {doc.get('schema_version')!r}")
    parts = doc["partitions"]
    plan = PartitionPlan(
        partitions=[tuple(p["layers"]) for p in parts],
        loads=[p["load"] for p in parts],
        params=[p["params"] for p in parts],
    )
    if net is not None:
        if network_digest(net) != doc["network"]["digest"]:
            problems.append("network digest does not match the model spec")
        try:
            plan.check_coverage(len(net))
            costs = network_costs(net)
            for k, (a, b) in enumerate(plan.partitions):
                if sum(costs[a - 1 : b]) != plan.loads[k]:
                    problems.append(f"partition {k + 1} load does not match the model spec")
        except InvalidPlanError as exc:
            problems.append(str(exc))
    else:
        try:
            plan.check_coverage(doc["network"]["num_layers"])
        except InvalidPlanError as exc:
            problems.append(str(exc))
    a = doc["allocation"]
    caps = a["knapsack_capacities"]
    report = alloc_mod.validate_allocation(a["genes"], plan.loads, caps)
    if not report.feasible:
        problems.append(f"capacity violated on devices {report.violated_devices}")
    if not np.allclose(report.per_device_load, a["per_device_load"], rtol=1e-12, atol=0):
        problems.append("per-device loads do not match the genes")
    pm = alloc_mod.profit_matrix(plan.loads, caps, inverse=doc["ga"].get("inverse_profit", False))
    if not np.isclose(alloc_mod.fitness(a["genes"], pm), a["profit"], rtol=1e-12, atol=0):
        problems.append("stored profit does not match the recomputed profit")
    return problems


def run_pipeline(model_path, cluster_path, opts: PipelineOptions = PipelineOptions(), out=None):
    """cost -> partition -> allocate -> simulate; returns (plan document, report)."""
    net = parse_model_spec(model_path)
    cfg = parse_cluster_spec(cluster_path)
    return run_pipeline_objects(net, cfg, opts, out)


def run_pipeline_objects(net: NetworkSpec, cfg: ClusterConfig, opts: PipelineOptions = PipelineOptions(), out=None):
    policy = PartitionPolicy(opts.alpha, opts.max_merge_load)
    plan = partition_network(net, policy)
    params = resolve_ga_params(cfg, opts)
    training = resolve_training(cfg, opts)
    budget = opts.step_budget if opts.step_budget is not None else cfg.step_budget
    allocation, caps, used_budget = allocate_plan(plan, cfg.cluster, params, budget)
    report = simulate(plan, allocation, cfg.cluster, training)
    doc = build_plan_document(net, policy, plan, cfg.cluster, caps, used_budget, allocation, params, training, report)
    if out is not None:
        Path(out).write_text(dumps(doc))
    return doc, report


def sweep(net: NetworkSpec, cfg: ClusterConfig, opts: PipelineOptions = PipelineOptions(), max_devices=None):
    """One simulation per prefix of the device list, m = 1..max_devices, ordered by m."""
    max_devices = max_devices or len(cfg.cluster)
    if not 1 <= max_devices <= len(cfg.cluster):
        raise ValueError(f"max_devices must lie in 1..{len(cfg.cluster)}")
    reports = []
    for m in range(1, max_devices + 1):
        sub = replace(cfg, cluster=cfg.cluster.subset(m))
        _, report = run_pipeline_objects(net, sub, opts)
        reports.append(report)
    return reports


_TABLE_COLUMNS = (
    ("m", "num_devices", "{:d}"),
    ("microbatch_s", "microbatch_time", "{:.6g}"),
    ("step_s", "step_time", "{:.6g}"),
    ("steps/epoch", "steps_per_epoch", "{:d}"),
    ("epoch_s", "epoch_time", "{:.6g}"),
    ("total_s", "total_time", "{:.6g}"),
    ("allreduce_s", "allreduce_time", "{:.6g}"),
    ("speedup", None, "{:.4f}"),
)


def emit_report(report, fmt: str = "table") -> str:
    """Render one SimReport or a list of them (a sweep)."""
    reports = report if isinstance(report, (list, tuple)) else [report]
    if fmt == "structured":
        payload = [r.to_dict() for r in reports]
        return dumps(payload if isinstance(report, (list, tuple)) else payload[0])
    if fmt != "table":
        raise ValueError(f"unknown report format {fmt!r}; expected one of {REPORT_FORMATS}")
    header = [name for name, _, _ in _TABLE_COLUMNS]
    rows = []
    for r in reports:
        row = []
        for _, attr, spec in _TABLE_COLUMNS:
            if attr is None:
                t1 = r.total_time * r.speedup_vs_single
                value = speedup(t1, r.total_time) if r.total_time > 0 else 1.0
            else:
                value = getattr(r, attr)
            row.append(spec.format(value))
        rows.append(row)
    widths = [max(len(h), *(len(row[k]) for row in rows)) for k, h in enumerate(header)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(lines) + "\n"


def parse_report(text: str):
    data = json.loads(text)
    if isinstance(data, list):
        return [SimReport.from_dict(d) for d in data]
    return SimReport.from_dict(data)


def cost_table(net: NetworkSpec, alpha: float = 1.0) -> list:
    costs = network_costs(net)
    heavy = heavy_mask(costs, alpha)
    return [
        {"index": layer.index, "name": layer.name, "kind": layer.kind, "mac_ops": c, "heavy": h}
        for layer, c, h in zip(net.layers, costs, heavy)
    ]


def verify_gradients(seed: int = 0, n_decomposition: int = 100, n_backprop: int = 20) -> dict:
    """Run the gradient checks and collect max deviations against their tolerances."""
    rng = np.random.default_rng(seed)
    checks = []

    worst = 0.0
    for k in range(n_decomposition):
        m = (2, 4)[k % 2]
        dims = [int(rng.integers(1, 6)) for _ in range(int(rng.integers(2, 5)))]
        net = TinyNet.random(dims, rng)
        b = int(rng.integers(1, 6))
        data = ShardedDataset(rng.normal(size=(b * m, dims[0])), rng.normal(size=(b * m, dims[-1])), m)
        worst = max(worst, relative_error(full_gradient(net, data), sharded_gradient(net, data)))
    checks.append({"name": "gradient decomposition", "max_deviation": worst, "tolerance": 1e-12})

    worst = 0.0
    for _ in range(n_backprop):
        dims = [int(rng.integers(1, 6)) for _ in range(int(rng.integers(2, 5)))]
        net = TinyNet.random(dims, rng)
        data = ShardedDataset(rng.normal(size=(8, dims[0])), rng.normal(size=(8, dims[-1])))
        worst = max(worst, relative_error(full_gradient(net, data), finite_diff_gradient(net, data, 1e-6)))
    checks.append({"name": "backprop vs finite differences", "max_deviation": worst, "tolerance": 1e-5})

    toy = train_toy(ToyConfig(seed=seed))
    gap = abs(toy.pipelined[-1] - toy.sequential[-1]) / toy.sequential[-1]
    checks.append({"name": "pipelined vs sequential final loss", "max_deviation": gap, "tolerance": 0.10})

    single = train_toy_delay_zero_gap(seed)
    checks.append({"name": "single-stage pipeline equals SGD", "max_deviation": single, "tolerance": 0.0})

    for c in checks:
        c["passed"] = bool(c["max_deviation"] <= c["tolerance"])
    return {"seed": seed, "passed": all(c["passed"] for c in checks), "checks": checks}


def train_toy_delay_zero_gap(seed: int = 0, steps: int = 50) -> float:
    """Largest absolute weight difference between a one-stage pipeline and plain SGD."""
    rng = np.random.default_rng(seed)
    net = TinyNet.random([4, 1], rng, bias=True)
    data = ShardedDataset(rng.normal(size=(16, 4)), rng.normal(size=(16, 1)))
    a, b = net.copy(), net.copy()
    state = PipelineState(1, lr=0.05)
    gap = 0.0
    for _ in range(steps):
        sgd_step(a, data, 0.05)
        delayed_gradient_step(state, b, (data.x, data.y))
        gap = max(gap, float(np.max(np.abs(a.flat_params() - b.flat_params()))))
    return gap


def render_gradient_report(report: dict, fmt: str = "table") -> str:
    if fmt == "structured":
        return dumps(report)
    if fmt != "table":
        raise ValueError(f"unknown report format {fmt!r}")
    lines = []
    for c in report["checks"]:
        status = "PASS" if c["passed"] else "FAIL"
        lines.append(f"{status}  {c['name']}: max deviation {c['max_deviation']:.3g} (tolerance {c['tolerance']:g})")
    lines.append("all checks passed" if report["passed"] else "some checks FAILED")
    return "\n".join(lines) + "\n"


def load_plan_document(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError([Violation("<document>", f"not valid JSON: {exc.msg}", exc.lineno)]) from None
    for key in ("schema_version", "network", "partitions", "allocation", "cluster", "ga"):
        if key not in doc:
            raise SchemaError([Violation(key, "missing from plan document")])
    return doc


def plan_from_document(doc: dict):
    """Rebuild (PartitionPlan, Allocation, ClusterSpec) from a plan document."""
    parts = doc["partitions"]
    plan = PartitionPlan(
        partitions=[tuple(p["layers"]) for p in parts],
        loads=[p["load"] for p in parts],
        params=[p["params"] for p in parts],
    )
    devices = tuple(
        Device(
            d["id"],
            d["capacity"],
            float("inf") if d["bandwidth"] is None else d["bandwidth"],
            d["latency"],
        )
        for d in doc["cluster"]["devices"]
    )
    a = doc["allocation"]
    report = alloc_mod.validate_allocation(a["genes"], plan.loads, a["knapsack_capacities"])
    allocation = alloc_mod.Allocation(
        genes=tuple(a["genes"]),
        profit=a["profit"],
        feasible=report.feasible,
        per_device_load=tuple(report.per_device_load),
    )
    return plan, allocation, ClusterSpec(devices)

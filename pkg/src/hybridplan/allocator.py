"""Partition-to-device assignment as a 0-1 multiple knapsack, solved with GABRA.

A chromosome is a tuple of 0-based device indices, one gene per partition,
so every partition is assigned to exactly one device by construction.
Capacity feasibility (sum of loads per device within its capacity) is
enforced by the initial population and by greedy repair of offspring.
"""

from __future__ import annotations

import bisect
import itertools
import logging
import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InfeasibleInstanceError, InstanceTooLargeError, InvalidClusterError

logger = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 10**7
_ENUM_CHUNK = 1 << 18
# relative tolerance when comparing loads against capacities
_CAP_RTOL = 1e-12


@dataclass(frozen=True)
class Device:
    id: str
    capacity: float
    link_bandwidth: float = float("inf")
    link_latency: float = 0.0


@dataclass(frozen=True)
class ClusterSpec:
    devices: tuple

    def __post_init__(self):
        devices = tuple(self.devices)
        object.__setattr__(self, "devices", devices)
        if not devices:
            raise InvalidClusterError("a cluster needs at least one device")
        for d in devices:
            if not d.capacity > 0:
                raise InvalidClusterError(f"device {d.id!r} has non-positive capacity {d.capacity}")
            if not d.link_bandwidth > 0:
                raise InvalidClusterError(f"device {d.id!r} has non-positive link bandwidth {d.link_bandwidth}")
            if d.link_latency < 0:
                raise InvalidClusterError(f"device {d.id!r} has negative link latency")

    def __len__(self):
        return len(self.devices)

    @property
    def capacities(self) -> list:
        return [d.capacity for d in self.devices]

    def subset(self, m: int) -> "ClusterSpec":
        return ClusterSpec(self.devices[:m])

    @classmethod
    def homogeneous(cls, m, capacity, bandwidth=float("inf"), latency=0.0):
        return cls(tuple(Device(f"gpu{j}", capacity, bandwidth, latency) for j in range(m)))


@dataclass(frozen=True)
class GaParams:
    population_size: int = 50
    t_max: int = 500
    crossover_prob: float = 0.8
    mutation_prob: float = 0.1
    seed: int = 0
    max_duplicate_retries: int = 20
    inverse_profit: bool = False
    require_all_devices: bool = False

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be at least 2")
        if self.t_max < 0:
            raise ValueError("t_max must be non-negative")
        for name in ("crossover_prob", "mutation_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclass(frozen=True)
class Allocation:
    genes: tuple
    profit: float
    feasible: bool
    per_device_load: tuple

    def assignment_matrix(self, m: int) -> np.ndarray:
        x = np.zeros((len(self.genes), m), dtype=int)
        x[np.arange(len(self.genes)), list(self.genes)] = 1
        return x


@dataclass(frozen=True)
class AllocationReport:
    per_device_load: tuple
    capacity_ok: tuple
    single_assignment_ok: bool
    all_devices_used: bool
    profit: float

    @property
    def feasible(self) -> bool:
        return self.single_assignment_ok and all(self.capacity_ok)

    @property
    def violated_devices(self) -> list:
        return [j for j, ok in enumerate(self.capacity_ok) if not ok]


def _check_capacities(capacities):
    for j, d in enumerate(capacities):
        if not d > 0:
            raise InvalidClusterError(f"device {j} has non-positive capacity {d}")


def profit_matrix(loads: Sequence[float], capacities: Sequence[float], inverse: bool = False) -> np.ndarray:
    """n x m matrix of p_i / d_j (or d_j / p_i with ``inverse``)."""
    _check_capacities(capacities)
    p = np.asarray(loads, dtype=float)
    d = np.asarray(capacities, dtype=float)
    if np.any(p < 0):
        raise ValueError("partition loads must be non-negative")
    if inverse:
        if np.any(p == 0):
            raise ValueError("inverse profit is undefined for zero-load partitions")
        return d[None, :] / p[:, None]
    return p[:, None] / d[None, :]


def fitness(genes: Sequence[int], pm) -> float:
    if len(genes) != len(pm):
        raise ValueError(f"chromosome has {len(genes)} genes but the profit matrix has {len(pm)} rows")
    return float(sum(pm[i][g] for i, g in enumerate(genes)))


def device_loads(genes, loads, m) -> list:
    out = [0.0] * m
    for g, p in zip(genes, loads):
        out[g] += p
    return out


def _fits(load, capacity):
    return load <= capacity * (1.0 + _CAP_RTOL)


def is_feasible(genes, loads, capacities, require_all_devices=False) -> bool:
    per_dev = device_loads(genes, loads, len(capacities))
    if not all(_fits(l, d) for l, d in zip(per_dev, capacities)):
        return False
    return not require_all_devices or len(set(genes)) == len(capacities)


def validate_allocation(genes, loads, capacities, pm=None) -> AllocationReport:
    genes = tuple(getattr(genes, "genes", genes))
    m = len(capacities)
    single = len(genes) == len(loads) and all(0 <= g < m for g in genes)
    per_dev = device_loads(genes, loads, m) if single else [float("nan")] * m
    if pm is None:
        pm = profit_matrix(loads, capacities)
    profit = fitness(genes, pm) if single else float("nan")
    return AllocationReport(
        per_device_load=tuple(per_dev),
        capacity_ok=tuple(_fits(l, d) for l, d in zip(per_dev, capacities)),
        single_assignment_ok=single,
        all_devices_used=single and len(set(genes)) == m,
        profit=profit,
    )


def make_allocation(genes, loads, capacities, pm=None, require_all_devices=False) -> Allocation:
    report = validate_allocation(genes, loads, capacities, pm)
    feasible = report.feasible and (report.all_devices_used or not require_all_devices)
    return Allocation(tuple(genes), report.profit, feasible, report.per_device_load)


def repair(genes, loads, capacities) -> Optional[tuple]:
    """Move partitions off overloaded devices until every device fits.

    On each pass the most overloaded device gives up its largest partition
    that fits elsewhere, to the device with the most slack that can take it.
    Returns None when no such move exists.
    """
    genes = list(genes)
    m = len(capacities)
    per_dev = device_loads(genes, loads, m)
    for _ in range(len(genes) * m + 1):
        over = [j for j in range(m) if not _fits(per_dev[j], capacities[j])]
        if not over:
            return tuple(genes)
        src = max(over, key=lambda j: (per_dev[j] - capacities[j], -j))
        members = sorted((i for i, g in enumerate(genes) if g == src), key=lambda i: (-loads[i], i))
        moved = False
        for i in members:
            targets = [j for j in range(m) if j != src and _fits(per_dev[j] + loads[i], capacities[j])]
            if targets:
                dst = max(targets, key=lambda j: (capacities[j] - per_dev[j], -j))
                genes[i] = dst
                per_dev[src] -= loads[i]
                per_dev[dst] += loads[i]
                moved = True
                break
        if not moved:
            return None
    return None


def first_fit_decreasing(loads, capacities) -> Optional[tuple]:
    """Deterministic greedy placement: heaviest partition first, into the first device that fits."""
    m = len(capacities)
    per_dev = [0.0] * m
    genes = [0] * len(loads)
    for i in sorted(range(len(loads)), key=lambda i: (-loads[i], i)):
        for j in range(m):
            if _fits(per_dev[j] + loads[i], capacities[j]):
                genes[i] = j
                per_dev[j] += loads[i]
                break
        else:
            return None
    return tuple(genes)


def _random_placement(loads, capacities, rng):
    m = len(capacities)
    per_dev = [0.0] * m
    genes = [0] * len(loads)
    order = list(range(len(loads)))
    rng.shuffle(order)
    for i in order:
        options = [j for j in range(m) if _fits(per_dev[j] + loads[i], capacities[j])]
        j = rng.choice(options) if options else rng.randrange(m)
        genes[i] = j
        per_dev[j] += loads[i]
    return repair(genes, loads, capacities)


def _ensure_all_devices(genes, loads, capacities, rng):
    """Best-effort move of single partitions onto idle devices."""
    genes = list(genes)
    m = len(capacities)
    for _ in range(m):
        idle = [j for j in range(m) if j not in genes]
        if not idle:
            return tuple(genes)
        per_dev = device_loads(genes, loads, m)
        j = idle[0]
        counts = [genes.count(k) for k in range(m)]
        donors = [i for i, g in enumerate(genes) if counts[g] > 1 and _fits(loads[i], capacities[j])]
        if not donors:
            return None
        i = min(donors, key=lambda i: (loads[i], i))
        genes[i] = j
    return tuple(genes) if len(set(genes)) == m else None


def diagnose_infeasible(loads, capacities, ids=None) -> str:
    ids = list(ids) if ids is not None else [str(j) for j in range(len(capacities))]
    total, cap_total = sum(loads), sum(capacities)
    biggest = max(range(len(loads)), key=lambda i: (loads[i], -i))
    tight = max(range(len(capacities)), key=lambda j: (capacities[j], -j))
    if loads[biggest] > capacities[tight]:
        return (
            f"partition {biggest + 1} (load {loads[biggest]:g}) exceeds every device; "
            f"tightest device is {ids[tight]!r} even at its capacity {capacities[tight]:g}"
        )
    tight = min(range(len(capacities)), key=lambda j: (capacities[j], j))
    if total > cap_total:
        return (
            f"total load {total:g} exceeds total capacity {cap_total:g}; "
            f"tightest device is {ids[tight]!r} (capacity {capacities[tight]:g})"
        )
    return f"no capacity-respecting packing found; tightest device is {ids[tight]!r} (capacity {capacities[tight]:g})"


def init_population(loads, capacities, params: GaParams = GaParams(), rng=None, attempts: int = 50) -> list:
    """Seeded random capacity-respecting chromosomes.

    Each chromosome is built by placing partitions in random order onto a
    random device with room left, then repairing; after ``attempts``
    failures the first-fit-decreasing packing is used instead.
    """
    _check_capacities(capacities)
    if rng is None:
        rng = random.Random(params.seed)
    fallback = first_fit_decreasing(loads, capacities)
    if fallback is not None and params.require_all_devices:
        fallback = _ensure_all_devices(fallback, loads, capacities, rng)
    population = []
    for _ in range(params.population_size):
        chromosome = None
        for _ in range(attempts):
            candidate = _random_placement(loads, capacities, rng)
            if candidate is not None and params.require_all_devices:
                candidate = _ensure_all_devices(candidate, loads, capacities, rng)
            if candidate is not None:
                chromosome = candidate
                break
        if chromosome is None:
            chromosome = fallback
        if chromosome is None:
            raise InfeasibleInstanceError(
                "no feasible assignment found", diagnose_infeasible(loads, capacities)
            )
        population.append(chromosome)
    return population


def _spin(population, cumulative, rng):
    total = cumulative[-1]
    if total <= 0:
        return rng.choice(population)
    k = bisect.bisect_right(cumulative, rng.random() * total)
    return population[min(k, len(population) - 1)]


def roulette_select(population, fitnesses, rng):
    """Two parents drawn independently with probability proportional to fitness.

    All-zero fitness falls back to uniform selection.
    """
    if any(f < 0 for f in fitnesses):
        raise ValueError("roulette selection needs non-negative fitness values")
    cumulative = list(itertools.accumulate(fitnesses))
    return _spin(population, cumulative, rng), _spin(population, cumulative, rng)


def midpoint_crossover(y1, y2):
    if len(y1) != len(y2):
        raise ValueError("parents must have equal length")
    cp = len(y1) // 2
    return tuple(y1[:cp]) + tuple(y2[cp:]), tuple(y2[:cp]) + tuple(y1[cp:])


def invert_segment(genes, start: int, end: int) -> tuple:
    """Reverse genes[start..end] (0-based, inclusive)."""
    genes = tuple(genes)
    return genes[:start] + genes[start : end + 1][::-1] + genes[end + 1 :]


def inversion_mutate(genes, rng, prob: float) -> tuple:
    genes = tuple(genes)
    if len(genes) < 2 or rng.random() >= prob:
        return genes
    i, j = sorted(rng.sample(range(len(genes)), 2))
    return invert_segment(genes, i, j)


@dataclass
class GabraSolver:
    """Steady-state GABRA loop; one ``step`` is one generation."""

    loads: Sequence[float]
    capacities: Sequence[float]
    params: GaParams = field(default_factory=GaParams)

    def __post_init__(self):
        self.loads = [float(p) for p in self.loads]
        self.capacities = [float(d) for d in self.capacities]
        self.pm = profit_matrix(self.loads, self.capacities, inverse=self.params.inverse_profit).tolist()
        self.rng = random.Random(self.params.seed)
        self.population = init_population(self.loads, self.capacities, self.params, self.rng)
        self.fitnesses = [fitness(z, self.pm) for z in self.population]
        best = max(range(len(self.population)), key=lambda k: (self.fitnesses[k], -k))
        self.best = self.population[best]
        self.best_fitness = self.fitnesses[best]
        self.generation = 0
        self.history = [self.best_fitness]
        self.inserted = 0
        if any(f < 0 for f in self.fitnesses):
            raise ValueError("profit matrix produced negative fitness")
        self._wheel = list(itertools.accumulate(self.fitnesses))

    def _offspring(self):
        p = self.params
        y1 = _spin(self.population, self._wheel, self.rng)
        y2 = _spin(self.population, self._wheel, self.rng)
        if self.rng.random() < p.crossover_prob:
            o1, o2 = midpoint_crossover(y1, y2)
            w = o1 if self.rng.random() < 0.5 else o2
        else:
            w = tuple(y1)
        return inversion_mutate(w, self.rng, p.mutation_prob)

    def step(self) -> bool:
        """Run one generation; returns True if an offspring entered the population."""
        members = set(self.population)
        w = None
        for _ in range(self.params.max_duplicate_retries):
            cand = self._offspring()
            if cand in members:
                continue
            cand = repair(cand, self.loads, self.capacities)
            if cand is not None and self.params.require_all_devices:
                cand = _ensure_all_devices(cand, self.loads, self.capacities, self.rng)
            if cand is None or cand in members:
                continue
            w = cand
            break
        self.generation += 1
        if w is not None:
            f = fitness(w, self.pm)
            worst = min(range(len(self.population)), key=lambda k: (self.fitnesses[k], k))
            self.population[worst] = w
            self.fitnesses[worst] = f
            self._wheel = list(itertools.accumulate(self.fitnesses))
            self.inserted += 1
            if f > self.best_fitness:
                self.best, self.best_fitness = w, f
        self.history.append(self.best_fitness)
        return w is not None

    def run(self) -> Allocation:
        while self.generation < self.params.t_max:
            self.step()
        logger.debug(
            "GABRA finished: %d generations, %d insertions, best %.6g",
            self.generation, self.inserted, self.best_fitness,
        )
        return self.allocation()

    def allocation(self) -> Allocation:
        return make_allocation(
            self.best, self.loads, self.capacities, self.pm, self.params.require_all_devices
        )


def gabra_solve(loads, capacities, params: GaParams = GaParams()) -> Allocation:
    return GabraSolver(loads, capacities, params).run()


def brute_force_allocate(loads, capacities, inverse_profit=False, require_all_devices=False) -> Allocation:
    """Exhaustive search over all m**n assignments.

    Ties go to the lexicographically smallest gene vector. Raises
    InfeasibleInstanceError when no assignment fits.
    """
    _check_capacities(capacities)
    n, m = len(loads), len(capacities)
    if m**n > BRUTE_FORCE_LIMIT:
        raise InstanceTooLargeError(f"{m}**{n} assignments exceeds the enumeration limit {BRUTE_FORCE_LIMIT}")
    pm = profit_matrix(loads, capacities, inverse=inverse_profit)
    p = np.asarray(loads, dtype=float)
    caps = np.asarray(capacities, dtype=float) * (1.0 + _CAP_RTOL)
    radix = m ** np.arange(n - 1, -1, -1, dtype=np.int64)
    best_profit, best_index = -np.inf, -1
    total = m**n
    for lo in range(0, total, _ENUM_CHUNK):
        idx = np.arange(lo, min(total, lo + _ENUM_CHUNK), dtype=np.int64)
        genes = (idx[:, None] // radix[None, :]) % m
        ok = np.ones(len(idx), dtype=bool)
        for j in range(m):
            ok &= ((genes == j) @ p) <= caps[j]
        if require_all_devices:
            for j in range(m):
                ok &= (genes == j).any(axis=1)
        if not ok.any():
            continue
        profits = np.zeros(len(idx))
        for i in range(n):
            profits += pm[i, genes[:, i]]
        profits[~ok] = -np.inf
        tol = 1e-12 * max(1.0, abs(float(profits.max())))
        k = int(np.argmax(profits >= profits.max() - tol))
        # strict improvement keeps the earlier (lexicographically smaller) vector on ties
        if best_index < 0 or profits[k] > best_profit + 1e-12 * max(1.0, abs(best_profit)):
            best_profit, best_index = profits[k], int(idx[k])
    if best_index < 0:
        raise InfeasibleInstanceError("no feasible assignment exists", diagnose_infeasible(loads, capacities))
    genes = tuple(int(g) for g in (best_index // radix) % m)
    return make_allocation(genes, loads, capacities, pm, require_all_devices)


def min_feasible_budget(loads, throughputs, rel_tol: float = 1e-9) -> float:
    """Smallest per-step time budget T for which first-fit-decreasing packs
    the loads into capacities ``throughput_j * T`` (found by bisection)."""
    _check_capacities(throughputs)
    lo = max(max(loads) / max(throughputs), sum(loads) / sum(throughputs))
    hi = sum(loads) / max(throughputs)
    if lo <= 0:
        return 0.0
    if first_fit_decreasing(loads, [s * lo for s in throughputs]) is not None:
        return lo
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if first_fit_decreasing(loads, [s * mid for s in throughputs]) is None:
            lo = mid
        else:
            hi = mid
    return hi


def budget_capacities(throughputs, budget: float) -> list:
    return [s * budget for s in throughputs]

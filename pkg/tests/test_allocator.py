import itertools
import random

import numpy as np
import pytest

from hybridplan.allocator import (
    ClusterSpec,
    Device,
    GabraSolver,
    GaParams,
    brute_force_allocate,
    budget_capacities,
    first_fit_decreasing,
    fitness,
    gabra_solve,
    init_population,
    invert_segment,
    inversion_mutate,
    is_feasible,
    midpoint_crossover,
    min_feasible_budget,
    profit_matrix,
    repair,
    roulette_select,
    validate_allocation,
)
from hybridplan.errors import InfeasibleInstanceError, InstanceTooLargeError, InvalidClusterError

from instances import feasible_instance

WORKED_LOADS = [5, 4, 3]
WORKED_CAPS = [8, 7]


def test_worked_instance_oracle_by_hand():
    # all 8 assignments enumerated independently of the solver
    pm = [[p / d for d in WORKED_CAPS] for p in WORKED_LOADS]
    best = None
    for genes in itertools.product(range(2), repeat=3):
        per = [sum(p for p, g in zip(WORKED_LOADS, genes) if g == j) for j in range(2)]
        if all(l <= d for l, d in zip(per, WORKED_CAPS)):
            value = sum(pm[i][g] for i, g in enumerate(genes))
            if best is None or value > best[0] + 1e-12:
                best = (value, genes)
    assert best[1] == (0, 1, 1)
    assert best[0] == pytest.approx(1.625, abs=1e-12)

    alloc = brute_force_allocate(WORKED_LOADS, WORKED_CAPS)
    assert alloc.genes == (0, 1, 1)
    assert alloc.profit == pytest.approx(1.625, abs=1e-12)
    assert alloc.per_device_load == (5, 7)


def test_worked_instance_gabra():
    alloc = gabra_solve(WORKED_LOADS, WORKED_CAPS, GaParams(seed=3))
    assert alloc.genes == (0, 1, 1)
    assert alloc.feasible


def test_profit_matrix_and_inverse():
    pm = profit_matrix([2, 4], [1, 2])
    np.testing.assert_allclose(pm, [[2, 1], [4, 2]])
    np.testing.assert_allclose(profit_matrix([2, 4], [1, 2], inverse=True), [[0.5, 1], [0.25, 0.5]])
    with pytest.raises(InvalidClusterError):
        profit_matrix([1], [0])


def test_validate_allocation_flags_each_failure():
    report = validate_allocation((0, 0, 0), WORKED_LOADS, WORKED_CAPS)
    assert not report.feasible
    assert report.violated_devices == [0]
    assert not report.all_devices_used
    assert not validate_allocation((0, 2, 1), WORKED_LOADS, WORKED_CAPS).single_assignment_ok
    assert not validate_allocation((0, 1), WORKED_LOADS, WORKED_CAPS).single_assignment_ok


def test_assignment_matrix_rows_sum_to_one():
    alloc = brute_force_allocate(WORKED_LOADS, WORKED_CAPS)
    x = alloc.assignment_matrix(2)
    assert x.sum(axis=1).tolist() == [1, 1, 1]
    assert x.tolist() == [[1, 0], [0, 1], [0, 1]]


def test_repair_moves_largest_fitting_partition():
    assert repair((0, 0, 0), WORKED_LOADS, WORKED_CAPS) in {(1, 0, 0), (0, 1, 1), (0, 1, 0), (0, 0, 1)}
    fixed = repair((0, 0, 0), WORKED_LOADS, WORKED_CAPS)
    assert is_feasible(fixed, WORKED_LOADS, WORKED_CAPS)
    assert repair((0, 0), [5, 5], [6, 4]) is None


def test_first_fit_decreasing():
    assert first_fit_decreasing([3, 5, 4], [8, 7]) == (0, 0, 1)
    assert first_fit_decreasing([9], [8, 7]) is None


def test_midpoint_crossover_swaps_halves():
    assert midpoint_crossover((0, 0, 0, 0), (1, 1, 1, 1)) == ((0, 0, 1, 1), (1, 1, 0, 0))
    assert midpoint_crossover((0, 0, 0), (1, 1, 1)) == ((0, 1, 1), (1, 0, 0))
    with pytest.raises(ValueError):
        midpoint_crossover((0,), (0, 1))


def test_inversion():
    assert invert_segment((0, 1, 2, 3, 4), 1, 3) == (0, 3, 2, 1, 4)
    rng = random.Random(0)
    assert inversion_mutate((0, 1, 2), rng, 0.0) == (0, 1, 2)
    out = inversion_mutate((0, 1, 2, 3), rng, 1.0)
    assert sorted(out) == [0, 1, 2, 3] and out != (0, 1, 2, 3)


def test_roulette_is_fitness_proportional():
    rng = random.Random(1)
    counts = {"a": 0, "b": 0}
    for _ in range(20000):
        for pick in roulette_select(["a", "b"], [1.0, 3.0], rng):
            counts[pick] += 1
    assert counts["b"] / sum(counts.values()) == pytest.approx(0.75, abs=0.01)
    assert roulette_select(["a", "b"], [0.0, 0.0], rng)[0] in {"a", "b"}
    with pytest.raises(ValueError):
        roulette_select(["a"], [-1.0], rng)


def test_init_population_is_feasible_and_seeded():
    loads, caps, _ = feasible_instance(5)
    params = GaParams(seed=11, population_size=10)
    pop = init_population(loads, caps, params)
    assert len(pop) == 10
    assert all(is_feasible(z, loads, caps) for z in pop)
    assert pop == init_population(loads, caps, params)


def test_init_population_infeasible_names_tightest_device():
    with pytest.raises(InfeasibleInstanceError) as err:
        init_population([10, 10], [5, 15])
    assert "tightest device" in err.value.diagnostic


def test_solver_history_is_monotone_and_worst_replaced():
    loads, caps, _ = feasible_instance(17)
    solver = GabraSolver(loads, caps, GaParams(seed=2, t_max=100, population_size=10))
    worst_before = min(solver.fitnesses)
    solver.run()
    assert all(b >= a for a, b in zip(solver.history, solver.history[1:]))
    assert len(solver.history) == 101
    assert min(solver.fitnesses) >= worst_before
    assert max(solver.fitnesses) == pytest.approx(solver.best_fitness)


def test_gabra_is_deterministic_per_seed():
    loads, caps, _ = feasible_instance(8)
    a = gabra_solve(loads, caps, GaParams(seed=42))
    b = gabra_solve(loads, caps, GaParams(seed=42))
    assert a == b


def test_require_all_devices():
    alloc = gabra_solve([1, 1, 1, 1], [10, 10, 10], GaParams(seed=0, require_all_devices=True))
    assert set(alloc.genes) == {0, 1, 2}
    oracle = brute_force_allocate([1, 1, 1, 1], [10, 10, 10], require_all_devices=True)
    assert set(oracle.genes) == {0, 1, 2}


def test_brute_force_guards():
    with pytest.raises(InstanceTooLargeError):
        brute_force_allocate([1] * 24, [1, 1, 1, 1, 1, 1, 1, 1])
    with pytest.raises(InfeasibleInstanceError):
        brute_force_allocate([5, 5], [4, 4])


def test_brute_force_tie_goes_to_smallest_vector():
    assert brute_force_allocate([1, 1], [5, 5]).genes == (0, 0)


def test_min_feasible_budget_balances_identical_devices():
    loads = [4, 4, 4, 4]
    budget = min_feasible_budget(loads, [2.0, 2.0])
    assert budget == pytest.approx(4.0)
    assert first_fit_decreasing(loads, budget_capacities([2.0, 2.0], budget)) is not None
    assert first_fit_decreasing(loads, budget_capacities([2.0, 2.0], budget * 0.99)) is None


def test_cluster_validation():
    with pytest.raises(InvalidClusterError):
        ClusterSpec(())
    with pytest.raises(InvalidClusterError):
        ClusterSpec((Device("a", 0.0),))
    with pytest.raises(InvalidClusterError):
        ClusterSpec((Device("a", 1.0, link_bandwidth=0.0),))
    c = ClusterSpec.homogeneous(4, 2.0)
    assert len(c.subset(2)) == 2 and c.capacities == [2.0] * 4


def test_fitness_length_check():
    with pytest.raises(ValueError):
        fitness((0,), profit_matrix([1, 2], [1]))

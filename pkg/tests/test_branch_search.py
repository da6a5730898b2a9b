import random
from functools import lru_cache
from itertools import product

import numpy as np
import pytest

from affinity_rsa import AffinityTensor
from branch_search import (BudgetModel, canonical, cheapest_resource, count_partition_chains,
                           enumerate_partition_chains, enumerate_partitions, format_tree, rank_trees,
                           search_optimal_tree, tree_dissimilarity_cost, tree_resource)
from errors import CapacityError, DimensionError, InfeasibleBudgetError


def _rgs_partitions(n):
    """Set partitions of range(n) from restricted growth strings"""
    out = []
    for labels in product(range(n), repeat=n):
        if labels[0] != 0 or any(labels[i] > max(labels[:i]) + 1 for i in range(1, n)):
            continue
        blocks = {}
        for item, label in enumerate(labels):
            blocks.setdefault(label, []).append(item)
        out.append(tuple(sorted(tuple(b) for b in blocks.values())))
    return out


def _refines(fine, coarse):
    return all(any(set(b) <= set(c) for c in coarse) for b in fine)


def _brute_chains(n, depth):
    parts = _rgs_partitions(n)
    chains = [(p,) for p in parts]
    for _ in range(depth - 1):
        chains = [c + (p,) for c in chains for p in parts if _refines(p, c[-1])]
    return chains


def _brute_cost(chain, values):
    total = 0.0
    for l, partition in enumerate(chain):
        maxes = [max((1.0 - values[l, i, j] for i in b for j in b if i < j), default=0.0) for b in partition]
        total += sum(maxes) / len(partition)
    return total


def _random_affinity(rng, n, d):
    values = np.empty((d, n, n))
    for l in range(d):
        m = rng.uniform(-1, 1, (n, n))
        m = (m + m.T) / 2
        np.fill_diagonal(m, 1.0)
        values[l] = m
    return AffinityTensor(values, [f"t{i}" for i in range(n)], [f"l{i}" for i in range(d)])


@pytest.mark.parametrize('n, depth, expected', [(2, 3, 4), (3, 1, 5), (3, 2, 12)])
def test_documented_chain_counts(n, depth, expected):
    assert len(list(enumerate_partition_chains(n, depth))) == expected
    assert count_partition_chains(n, depth) == expected


def test_counts_match_brute_force_recursion():
    @lru_cache(maxsize=None)
    def count_from(partition, remaining):
        if remaining == 0:
            return 1
        return sum(count_from(p, remaining - 1) for p in parts if _refines(p, partition))

    for n in range(1, 7):
        parts = _rgs_partitions(n)
        for depth in range(1, 4):
            brute = sum(count_from(p, depth - 1) for p in parts)
            count_from.cache_clear()
            assert len(list(enumerate_partition_chains(n, depth))) == brute
            assert count_partition_chains(n, depth) == brute


def test_known_count_sequences():
    assert [count_partition_chains(n, 2) for n in range(1, 7)] == [1, 3, 12, 60, 358, 2471]
    assert [count_partition_chains(n, 3) for n in range(1, 7)] == [1, 4, 22, 154, 1304, 12915]


def test_chains_refine_and_are_ordered():
    chains = list(enumerate_partition_chains(4, 3))
    assert chains == sorted(chains)
    assert len(set(chains)) == len(chains)
    for chain in chains:
        for coarse, fine in zip(chain, chain[1:]):
            assert _refines(fine, coarse)
        for partition in chain:
            assert sorted(i for b in partition for i in b) == [0, 1, 2, 3]
            assert [b[0] for b in partition] == sorted(b[0] for b in partition)


def test_partition_count_is_bell_number():
    assert [len(enumerate_partitions(n)) for n in range(1, 7)] == [1, 2, 5, 15, 52, 203]


@pytest.mark.parametrize('n, depth', [(0, 1), (13, 1), (3, 0)])
def test_capacity_guard(n, depth):
    with pytest.raises(CapacityError):
        list(enumerate_partition_chains(n, depth))


def test_singleton_tree_has_zero_cost(rng):
    affinity = _random_affinity(rng, 3, 2)
    chain = (((0,), (1,), (2,)),) * 2
    assert tree_dissimilarity_cost(chain, affinity) == 0.0


def test_single_pair_contributes_its_dissimilarity():
    values = np.ones((2, 2, 2))
    values[1, 0, 1] = values[1, 1, 0] = 0.6
    affinity = AffinityTensor(values, ['a', 'b'], ['l0', 'l1'])
    chain = (((0, 1),), ((0, 1),))
    assert tree_dissimilarity_cost(chain, affinity) == pytest.approx(0.4, abs=1e-15)


def test_cost_matches_brute_force_over_blocks():
    values = np.array([[[1.0, 0.7, 0.2], [0.7, 1.0, -0.1], [0.2, -0.1, 1.0]]])
    affinity = AffinityTensor(values, ['a', 'b', 'c'], ['enc'])
    chain = (((0, 1), (2,)),)
    assert tree_dissimilarity_cost(chain, affinity) == pytest.approx(_brute_cost(chain, values), abs=1e-15)
    assert tree_dissimilarity_cost(chain, affinity) == pytest.approx(0.15, abs=1e-15)


def test_cost_dimension_mismatch(rng):
    with pytest.raises(DimensionError):
        tree_dissimilarity_cost((((0, 1),),), _random_affinity(rng, 2, 2))


def test_tree_resource_arithmetic():
    model = BudgetModel((10, 10), (1, 1), 100)
    shared = (((0, 1),), ((0, 1),))
    split = (((0,), (1,)), ((0,), (1,)))
    mixed = (((0, 1),), ((0,), (1,)))
    assert tree_resource(shared, model) == 22
    assert tree_resource(split, model) == 42
    assert tree_resource(mixed, model) == 32
    assert cheapest_resource(model) == 22


def test_fully_shared_wins_when_all_affine():
    affinity = AffinityTensor(np.ones((2, 2, 2)), ['a', 'b'], ['l0', 'l1'])
    best = search_optimal_tree(affinity, BudgetModel((10, 10), (1, 1), 1000))
    assert best.layers == (((0, 1),), ((0, 1),))
    assert best.cost == 0.0
    assert best.resource == 22


def test_budget_below_shared_tree_is_infeasible():
    affinity = AffinityTensor(np.ones((2, 2, 2)), ['a', 'b'], ['l0', 'l1'])
    with pytest.raises(InfeasibleBudgetError, match="cheapest tree needs 22") as info:
        search_optimal_tree(affinity, BudgetModel((10, 10), (1, 1), 21))
    assert info.value.cheapest == 22


def _oracle_winner(affinity, model, seed):
    chains = sorted(_brute_chains(affinity.num_tasks, affinity.num_locations))
    order = {c: i for i, c in enumerate(chains)}
    random.Random(seed).shuffle(chains)
    feasible = []
    for chain in chains:
        resource = sum(len(p) * c for p, c in zip(chain, model.shared_costs)) + sum(model.decoder_costs)
        if resource <= model.budget:
            feasible.append(((_brute_cost(chain, affinity.values), resource, order[chain]), chain))
    return min(feasible)[1]


def test_search_matches_brute_force_argmin():
    rng = np.random.default_rng(7)
    for fixture in range(24):
        n = int(rng.integers(2, 5))
        depth = int(rng.integers(1, 4))
        affinity = _random_affinity(rng, n, depth)
        shared = tuple(float(c) for c in rng.integers(1, 20, depth))
        model0 = BudgetModel(shared, tuple(float(c) for c in rng.integers(0, 5, n)), 0)
        low = cheapest_resource(model0)
        high = low + sum(shared) * (n - 1)
        model = BudgetModel(model0.shared_costs, model0.decoder_costs, float(rng.uniform(low, high)))

        best = search_optimal_tree(affinity, model)
        first = _oracle_winner(affinity, model, seed=fixture)
        second = _oracle_winner(affinity, model, seed=fixture + 1000)
        assert first == second
        assert best.layers == first
        assert rank_trees(affinity, model)[0] == best


def test_ties_break_on_resource_then_order():
    # zero dissimilarity everywhere: every tree costs 0, so the cheapest wins
    affinity = AffinityTensor(np.ones((2, 3, 3)), ['a', 'b', 'c'], ['l0', 'l1'])
    model = BudgetModel((5, 5), (1, 1, 1), 1000)
    ranked = rank_trees(affinity, model)
    assert len(ranked) == 12
    assert ranked[0].layers == (((0, 1, 2),), ((0, 1, 2),))
    resources = [t.resource for t in ranked]
    assert resources == sorted(resources)
    assert rank_trees(affinity, model, limit=3) == ranked[:3]


def test_format_tree_lists_depths():
    affinity = AffinityTensor(np.ones((1, 2, 2)), ['seg', 'depth'], ['enc'])
    best = search_optimal_tree(affinity, BudgetModel((4,), (1, 1), 10))
    text = format_tree(best, affinity.tasks, affinity.locations)
    assert text.splitlines()[0] == "depth 0 (enc): {seg, depth}"
    assert "resource=6" in text


def _integer_model(rng, n, depth, budget):
    shared = tuple(float(c) for c in rng.integers(1, 10, depth))
    decoders = tuple(float(c) for c in rng.integers(0, 4, n))
    return BudgetModel(shared, decoders, budget)


def test_relaxing_the_budget_never_raises_the_cost():
    rng = np.random.default_rng(31)
    for _ in range(12):
        n = int(rng.integers(2, 5))
        depth = int(rng.integers(1, 4))
        affinity = _random_affinity(rng, n, depth)
        base = _integer_model(rng, n, depth, 0.0)
        low = cheapest_resource(base)
        high = low + sum(base.shared_costs) * (n - 1)
        costs = []
        for budget in np.linspace(low, high, 9):
            model = BudgetModel(base.shared_costs, base.decoder_costs, float(budget))
            costs.append(search_optimal_tree(affinity, model).cost)
        assert all(later <= earlier for earlier, later in zip(costs, costs[1:]))
        unbounded = BudgetModel(base.shared_costs, base.decoder_costs, high)
        assert costs[-1] == min(t.cost for t in rank_trees(affinity, unbounded))


def _relabel(layers, order):
    """Map a tree over permuted task indices back to the original indices"""
    return tuple(canonical([[int(order[i]) for i in block] for block in partition]) for partition in layers)


def test_permuting_tasks_permutes_the_winner():
    rng = np.random.default_rng(43)
    for _ in range(16):
        n = int(rng.integers(2, 5))
        depth = int(rng.integers(1, 4))
        affinity = _random_affinity(rng, n, depth)
        base = _integer_model(rng, n, depth, 0.0)
        low = cheapest_resource(base)
        budget = float(rng.uniform(low, low + sum(base.shared_costs) * (n - 1)))
        model = BudgetModel(base.shared_costs, base.decoder_costs, budget)
        order = rng.permutation(n)
        shuffled = affinity.permuted(order)
        shuffled_model = BudgetModel(model.shared_costs, tuple(model.decoder_costs[i] for i in order), budget)
        assert shuffled.tasks == [affinity.tasks[i] for i in order]

        best = search_optimal_tree(affinity, model)
        moved = search_optimal_tree(shuffled, shuffled_model)
        mapped = _relabel(moved.layers, order)
        assert moved.cost == pytest.approx(best.cost, abs=1e-12)
        assert moved.resource == best.resource
        assert tree_dissimilarity_cost(mapped, affinity) == pytest.approx(moved.cost, abs=1e-12)
        assert tree_resource(mapped, model) == moved.resource

        # equal-cost trees may be ordered differently; a unique winner must map exactly
        winners = {t.layers for t in rank_trees(affinity, model)
                   if t.resource == best.resource and abs(t.cost - best.cost) <= 1e-12}
        assert mapped in winners
        if len(winners) == 1:
            assert mapped == best.layers


def test_permuted_hand_example():
    values = np.array([[[1.0, 0.9, -0.5], [0.9, 1.0, -0.4], [-0.5, -0.4, 1.0]]])
    affinity = AffinityTensor(values, ['seg', 'depth', 'normals'], ['enc'])
    model = BudgetModel((4.0,), (1.0, 2.0, 3.0), 14.0)
    best = search_optimal_tree(affinity, model)
    assert best.layers == (((0, 1), (2,)),)

    order = [2, 0, 1]
    shuffled = affinity.permuted(order)
    moved = search_optimal_tree(shuffled, BudgetModel((4.0,), (3.0, 1.0, 2.0), 14.0))
    # normals is now task 0; seg and depth are tasks 1 and 2
    assert moved.layers == (((0,), (1, 2)),)
    assert _relabel(moved.layers, order) == best.layers

"""
Budget-constrained search over branched multi-task architectures

A branch tree is a chain of task partitions, one per shared location, where
each layer refines the one before it. Tasks in the same block share that
location's layer; every task ends in its own decoder.
"""
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import product
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from affinity_rsa import AffinityTensor
from config import Config
from errors import CapacityError, DimensionError, DomainError, InfeasibleBudgetError

logger = logging.getLogger(__name__)

Block = Tuple[int, ...]
Partition = Tuple[Block, ...]
Chain = Tuple[Partition, ...]


@dataclass(frozen=True)
class BudgetModel:
    """Per-branch layer costs p_l, per-task decoder costs and the budget cap"""

    shared_costs: Tuple[float, ...]
    decoder_costs: Tuple[float, ...]
    budget: float

    def __post_init__(self):
        object.__setattr__(self, 'shared_costs', tuple(float(c) for c in self.shared_costs))
        object.__setattr__(self, 'decoder_costs', tuple(float(c) for c in self.decoder_costs))
        costs = self.shared_costs + self.decoder_costs + (float(self.budget),)
        if any(not math.isfinite(c) or c < 0 for c in costs):
            raise DomainError("budget model costs must be finite and non-negative")


@dataclass(frozen=True)
class BranchTree:
    layers: Chain
    cost: float
    resource: float

    @property
    def depth(self) -> int:
        return len(self.layers)

    def branch_counts(self) -> List[int]:
        return [len(p) for p in self.layers]


def canonical(blocks) -> Partition:
    """Sort members within blocks and blocks by their smallest member"""
    return tuple(sorted((tuple(sorted(b)) for b in blocks if b), key=lambda b: b[0]))


def _set_partitions(items: Tuple[int, ...]) -> Iterator[List[List[int]]]:
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for sub in _set_partitions(rest):
        yield [[first]] + sub
        for i in range(len(sub)):
            yield sub[:i] + [[first] + sub[i]] + sub[i + 1:]


@lru_cache(maxsize=None)
def block_partitions(block: Block) -> Tuple[Partition, ...]:
    """Every partition of one block, in canonical order"""
    return tuple(sorted(canonical(p) for p in _set_partitions(block)))


def enumerate_partitions(n: int) -> Tuple[Partition, ...]:
    """All set partitions of {0..n-1} in canonical order"""
    if n < 1:
        raise CapacityError(f"task count must be >= 1, got {n}")
    return block_partitions(tuple(range(n)))


@lru_cache(maxsize=None)
def refinements(partition: Partition) -> Tuple[Partition, ...]:
    """Partitions refining `partition` (itself included), sorted"""
    options = [block_partitions(b) for b in partition]
    return tuple(sorted(canonical([b for sub in combo for b in sub]) for combo in product(*options)))


def _check_guard(n: int, depth: int):
    if not 1 <= n <= Config.MAX_TASKS:
        raise CapacityError(f"task count {n} outside 1..{Config.MAX_TASKS}")
    if depth < 1:
        raise CapacityError(f"depth must be >= 1, got {depth}")


def enumerate_partition_chains(n: int, depth: int) -> Iterator[Chain]:
    """
    Stream every length-`depth` refining chain of partitions of n tasks

    Chains come in lexicographic order of their layers, each layer in
    canonical form. Consecutive layers may be equal.
    """
    _check_guard(n, depth)

    def extend(prefix: List[Partition]) -> Iterator[Chain]:
        if len(prefix) == depth:
            yield tuple(prefix)
            return
        for nxt in refinements(prefix[-1]):
            prefix.append(nxt)
            yield from extend(prefix)
            prefix.pop()

    for first in enumerate_partitions(n):
        yield from extend([first])


def count_partition_chains(n: int, depth: int) -> int:
    """
    Count refining chains without enumerating them

    A chain splits into independent sub-chains under each first-layer block,
    so count(m, d) sums over set partitions of m the product of
    count(|B|, d - 1), grouped by the size of the block holding element 0.
    """
    _check_guard(n, depth)

    @lru_cache(maxsize=None)
    def chains(m: int, d: int) -> int:
        if d == 0:
            return 1
        weighted = [1] + [0] * m
        for size in range(1, m + 1):
            weighted[size] = sum(
                math.comb(size - 1, k - 1) * chains(k, d - 1) * weighted[size - k]
                for k in range(1, size + 1)
            )
        return weighted[m]

    return chains(n, depth)


def _check_affinity(chain: Chain, affinity: AffinityTensor):
    if len(chain) != affinity.num_locations:
        raise DimensionError(f"tree depth {len(chain)} != affinity locations {affinity.num_locations}")
    n = sum(len(b) for b in chain[0])
    if n != affinity.num_tasks:
        raise DimensionError(f"tree covers {n} tasks, affinity has {affinity.num_tasks}")


def _layer_cost(partition: Partition, dissimilarity: np.ndarray) -> float:
    total = 0.0
    for block in partition:
        if len(block) > 1:
            idx = np.asarray(block)
            total += float(dissimilarity[np.ix_(idx, idx)].max())
    return total / len(partition)


def tree_dissimilarity_cost(chain: Chain, affinity: AffinityTensor) -> float:
    """Sum over depths of the mean (over blocks) largest in-block dissimilarity 1 - A"""
    _check_affinity(chain, affinity)
    return float(sum(
        _layer_cost(partition, 1.0 - affinity.values[l]) for l, partition in enumerate(chain)
    ))


def tree_resource(chain: Chain, model: BudgetModel) -> float:
    """One p_l per branch at each depth plus every task's decoder"""
    if len(chain) != len(model.shared_costs):
        raise DimensionError(f"tree depth {len(chain)} != {len(model.shared_costs)} shared costs")
    n = sum(len(b) for b in chain[0])
    if n != len(model.decoder_costs):
        raise DimensionError(f"tree covers {n} tasks, model has {len(model.decoder_costs)} decoders")
    shared = sum(len(p) * c for p, c in zip(chain, model.shared_costs))
    return float(shared + sum(model.decoder_costs))


def _scored(affinity: AffinityTensor, model: BudgetModel) -> Iterator[Tuple[Tuple[float, float, int], BranchTree]]:
    if affinity.num_locations != len(model.shared_costs):
        raise DimensionError(
            f"affinity has {affinity.num_locations} locations, model has {len(model.shared_costs)}"
        )
    if affinity.num_tasks != len(model.decoder_costs):
        raise DimensionError(
            f"affinity has {affinity.num_tasks} tasks, model has {len(model.decoder_costs)} decoders"
        )
    for index, chain in enumerate(enumerate_partition_chains(affinity.num_tasks, affinity.num_locations)):
        tree = BranchTree(chain, tree_dissimilarity_cost(chain, affinity), tree_resource(chain, model))
        yield (tree.cost, tree.resource, index), tree


def cheapest_resource(model: BudgetModel) -> float:
    """Resource of the fully shared tree, the smallest any tree can need"""
    return float(sum(model.shared_costs) + sum(model.decoder_costs))


def rank_trees(affinity: AffinityTensor, model: BudgetModel, limit: Optional[int] = None) -> List[BranchTree]:
    """All trees within budget, best first (cost, then resource, then enumeration order)"""
    feasible = [(key, tree) for key, tree in _scored(affinity, model) if tree.resource <= model.budget]
    feasible.sort(key=lambda kt: kt[0])
    logger.debug("%d feasible trees under budget %g", len(feasible), model.budget)
    ranked = [tree for _, tree in feasible]
    return ranked[:limit] if limit is not None else ranked


def search_optimal_tree(affinity: AffinityTensor, model: BudgetModel) -> BranchTree:
    """
    Find the lowest-cost branch tree that fits the budget

    Raises:
        InfeasibleBudgetError: when even the fully shared tree is over budget
    """
    best_key, best = None, None
    seen = 0
    for key, tree in _scored(affinity, model):
        seen += 1
        if tree.resource > model.budget:
            continue
        if best_key is None or key < best_key:
            best_key, best = key, tree

    if best is None:
        raise InfeasibleBudgetError(model.budget, cheapest_resource(model))
    logger.info("searched %d trees; best cost %.6g at resource %g", seen, best.cost, best.resource)
    return best


def format_partition(partition: Partition, tasks: Sequence[str]) -> str:
    return ' '.join('{' + ', '.join(tasks[i] for i in block) + '}' for block in partition)


def format_tree(tree: BranchTree, tasks: Sequence[str], locations: Optional[Sequence[str]] = None) -> str:
    """Render a tree as one line of nested blocks per depth"""
    locations = list(locations) if locations is not None else [str(l) for l in range(tree.depth)]
    lines = [
        f"depth {l} ({locations[l]}): {format_partition(p, tasks)}"
        for l, p in enumerate(tree.layers)
    ]
    lines.append(f"decoders: {', '.join(tasks)}")
    lines.append(f"cost={tree.cost:.17g}")
    lines.append(f"resource={tree.resource:.17g}")
    return '\n'.join(lines)

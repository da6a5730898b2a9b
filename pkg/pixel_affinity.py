"""
Pixel affinity in dilated local patches

For each task, pairs of nearby pixels are marked similar or dissimilar on the
task's label map. Comparing the flags of two tasks over the same pairs shows
how well their local structure agrees at a given patch size (dilation).
"""
import logging
from dataclasses import dataclass, replace
from itertools import combinations_with_replacement, combinations
from typing import Iterator, List, Mapping, Sequence, Tuple

import numpy as np

from config import Config
from errors import DimensionError, DomainError, PairSetMismatchError
from tensor_io import LabelMap

logger = logging.getLogger(__name__)

RULE_KINDS = ('equality', 'relative')
SWEEP_HEADER = ['dilation', 'task_a', 'task_b', 'correspondence']


@dataclass(frozen=True)
class AffinityRule:
    """How two pixels of one task are judged similar, and the window they are drawn from"""

    kind: str = 'equality'
    threshold: float = Config.RELATIVE_THRESHOLD
    radius: int = Config.AFFINITY_RADIUS
    dilation: int = 1

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise DomainError(f"unknown rule kind {self.kind!r}")
        if self.kind == 'relative' and not self.threshold > 0:
            raise DomainError(f"relative threshold must be > 0, got {self.threshold}")
        if self.radius < 1 or self.dilation < 1:
            raise DomainError("radius and dilation must be >= 1")


@dataclass
class PairSet:
    """Unordered pixel pairs (raster indices p < q) and their similarity flags"""

    height: int
    width: int
    radius: int
    dilation: int
    p: np.ndarray
    q: np.ndarray
    similar: np.ndarray

    def __len__(self) -> int:
        return self.p.size

    @property
    def geometry(self) -> Tuple[int, int, int, int]:
        return self.height, self.width, self.radius, self.dilation

    def negated(self) -> 'PairSet':
        return replace(self, similar=~self.similar)


def forward_offsets(radius: int, dilation: int) -> List[Tuple[int, int]]:
    """Window offsets that land later in raster order, in raster order"""
    out = []
    for dy in range(0, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx <= 0:
                continue
            out.append((dy * dilation, dx * dilation))
    return out


def expected_pair_count(height: int, width: int, radius: int, dilation: int) -> int:
    """Number of in-bounds unordered pairs for a window geometry"""
    return sum(
        max(height - dy, 0) * max(width - abs(dx), 0)
        for dy, dx in forward_offsets(radius, dilation)
    )


def _similar(a: np.ndarray, b: np.ndarray, rule: AffinityRule) -> np.ndarray:
    if rule.kind == 'equality':
        return a == b
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), Config.RELATIVE_EPS)
    return np.abs(a - b) / scale <= rule.threshold


def label_affinity_pairs(label_map: LabelMap, rule: AffinityRule) -> PairSet:
    """
    Flag every in-bounds pair of pixels inside the dilated window

    Pairs leaving the image are dropped. Output is sorted by (p, q) in raster
    order.
    """
    if rule.kind == 'equality' and label_map.kind != 'categorical':
        raise DomainError("equality rule needs a categorical label map")
    if rule.kind == 'relative' and label_map.kind != 'continuous':
        raise DomainError("relative-threshold rule needs a continuous label map")

    h, w = label_map.height, label_map.width
    values = label_map.values
    ps, qs, flags = [], [], []
    for dy, dx in forward_offsets(rule.radius, rule.dilation):
        rows = h - dy
        x0, x1 = max(0, -dx), min(w, w - dx)
        if rows <= 0 or x1 <= x0:
            continue
        ys, xs = np.meshgrid(np.arange(rows), np.arange(x0, x1), indexing='ij')
        p = (ys * w + xs).ravel()
        q = ((ys + dy) * w + xs + dx).ravel()
        ps.append(p)
        qs.append(q)
        flags.append(_similar(values.ravel()[p], values.ravel()[q], rule))

    if ps:
        p, q, sim = np.concatenate(ps), np.concatenate(qs), np.concatenate(flags)
        order = np.lexsort((q, p))
        p, q, sim = p[order], q[order], sim[order]
    else:
        p = q = np.zeros(0, dtype=np.int64)
        sim = np.zeros(0, dtype=bool)
    return PairSet(h, w, rule.radius, rule.dilation, p.astype(np.int64), q.astype(np.int64), sim.astype(bool))


def cross_task_correspondence(a: PairSet, b: PairSet) -> float:
    """Fraction of pairs on which two tasks agree about similarity"""
    if a.geometry != b.geometry or not (np.array_equal(a.p, b.p) and np.array_equal(a.q, b.q)):
        raise PairSetMismatchError(f"pair sets differ: geometry {a.geometry} vs {b.geometry}")
    if len(a) == 0:
        raise PairSetMismatchError("pair sets are empty; the window does not fit the image")
    return float(np.mean(a.similar == b.similar))


def binarize_edges(values: np.ndarray, threshold: float = 0.5) -> LabelMap:
    """Edge maps compare as categorical labels once binarized at `threshold`"""
    return LabelMap('categorical', (np.asarray(values, dtype=np.float64) >= threshold).astype(np.int64))


def _task_pairs(tasks: Sequence[str], include_self: bool) -> Iterator[Tuple[str, str]]:
    if include_self or len(tasks) == 1:
        return combinations_with_replacement(tasks, 2)
    return combinations(tasks, 2)


def dilation_sweep(maps: Mapping[str, LabelMap], rules: Mapping[str, AffinityRule],
                   dilations: Sequence[int], include_self: bool = False) -> List[Tuple[int, str, str, float]]:
    """
    Correspondence per dilation and unordered task pair

    Returns rows (dilation, task_a, task_b, correspondence) ready for CSV.
    A single task is compared against itself.
    """
    tasks = list(maps)
    if not tasks:
        raise DimensionError("need at least one label map")
    shapes = {t: maps[t].values.shape for t in tasks}
    if len(set(shapes.values())) > 1:
        raise DimensionError(f"label maps differ in size: {shapes}")
    missing = [t for t in tasks if t not in rules]
    if missing:
        raise DimensionError(f"no affinity rule for: {', '.join(missing)}")

    rows = []
    for d in dilations:
        pairs = {t: label_affinity_pairs(maps[t], replace(rules[t], dilation=int(d))) for t in tasks}
        for a, b in _task_pairs(tasks, include_self):
            rows.append((int(d), a, b, cross_task_correspondence(pairs[a], pairs[b])))
        logger.debug("dilation %d: %d pairs per task", d, len(pairs[tasks[0]]))
    return rows

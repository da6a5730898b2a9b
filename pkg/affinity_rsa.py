"""
Representation dissimilarity matrices and the task-affinity tensor

Each task's single-task network is sampled at D locations with the same K
held-out images. An RDM holds 1 - pearson between the linearized activations
of every image pair; two tasks are as affine at a location as their RDM upper
triangles are rank-correlated.
"""
import logging
from dataclasses import dataclass
from typing import List, Mapping, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import rankdata

from config import Config
from errors import DegenerateRankingError, DimensionError, DomainError

logger = logging.getLogger(__name__)


@dataclass
class AffinityTensor:
    """D x N x N task affinities with task names and location labels"""

    values: np.ndarray
    tasks: List[str]
    locations: List[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[1] != self.values.shape[2]:
            raise DimensionError(f"affinity tensor must be D x N x N, got {self.values.shape}")
        if len(self.tasks) != self.values.shape[1]:
            raise DimensionError(f"{len(self.tasks)} task names for N={self.values.shape[1]}")
        if len(self.locations) != self.values.shape[0]:
            raise DimensionError(f"{len(self.locations)} location labels for D={self.values.shape[0]}")
        self._check_values()

    def _check_values(self):
        v, tol = self.values, Config.AFFINITY_TOL
        if not np.all(np.isfinite(v)):
            raise DomainError("affinity tensor contains non-finite values")
        if np.any(np.abs(v) > 1.0 + tol):
            raise DomainError("affinity values must lie in [-1, 1]")
        for d, loc in enumerate(self.locations):
            if not np.allclose(v[d], v[d].T, rtol=0.0, atol=tol):
                raise DomainError(f"affinity slice {loc!r} is not symmetric")
            if not np.allclose(np.diag(v[d]), 1.0, rtol=0.0, atol=tol):
                raise DomainError(f"affinity slice {loc!r} must have a unit diagonal")

    @property
    def num_locations(self) -> int:
        return self.values.shape[0]

    @property
    def num_tasks(self) -> int:
        return self.values.shape[1]

    def dissimilarity(self, location: int, i: int, j: int) -> float:
        return 1.0 - float(self.values[location, i, j])

    def permuted(self, order: Sequence[int]) -> 'AffinityTensor':
        """Same tensor with tasks re-ordered as `order`"""
        idx = np.asarray(order)
        return AffinityTensor(self.values[:, idx][:, :, idx], [self.tasks[i] for i in idx], list(self.locations))


def rdm_from_features(features: np.ndarray) -> np.ndarray:
    """
    Build a K x K RDM from a feature matrix (one image per row)

    Rows of higher-rank activations are linearized first. Entries are
    1 - pearson(row_i, row_j), clipped to [0, 2], with an exact zero diagonal.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim < 2:
        raise DimensionError(f"features need one row per image, got shape {x.shape}")
    x = x.reshape(x.shape[0], -1)
    k, c = x.shape
    if k < 2:
        raise DimensionError(f"need at least 2 images, got {k}")
    if c < 2:
        raise DimensionError(f"each row needs at least 2 elements, got {c}")
    if not np.all(np.isfinite(x)):
        raise DimensionError("features contain non-finite values")

    # constancy checked on raw values
    flat = np.flatnonzero(np.ptp(x, axis=1) == 0.0)
    if flat.size:
        raise DimensionError(f"row {int(flat[0])} has zero variance; correlation is undefined")

    centered = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum('ij,ij->i', centered, centered))
    unit = centered / norms[:, None]

    # 1 - rho = ||u_i - u_j||^2 / 2 for unit rows; exact zero for identical rows
    upper = np.zeros((k, k))
    for i in range(k - 1):
        diff = unit[i + 1:] - unit[i]
        upper[i, i + 1:] = 0.5 * np.einsum('jk,jk->j', diff, diff)
    rdm = np.clip(upper + upper.T, 0.0, 2.0)
    np.fill_diagonal(rdm, 0.0)
    return rdm


def _upper(rdm: np.ndarray) -> np.ndarray:
    rdm = np.asarray(rdm, dtype=np.float64)
    if rdm.ndim != 2 or rdm.shape[0] != rdm.shape[1]:
        raise DimensionError(f"RDM must be square, got shape {rdm.shape}")
    return rdm[np.triu_indices(rdm.shape[0], k=1)]


def spearman_upper(rdm_a: np.ndarray, rdm_b: np.ndarray) -> float:
    """Spearman correlation of two RDMs' strict upper triangles (average ranks for ties)"""
    a, b = _upper(rdm_a), _upper(rdm_b)
    if np.shape(rdm_a) != np.shape(rdm_b):
        raise DimensionError(f"RDM shapes differ: {np.shape(rdm_a)} vs {np.shape(rdm_b)}")
    if a.size < 3:
        raise DimensionError("need K >= 3 images for a rank correlation")

    ra = rankdata(a, method='average')
    rb = rankdata(b, method='average')
    ra -= ra.mean()
    rb -= rb.mean()
    na, nb = np.sqrt(ra @ ra), np.sqrt(rb @ rb)
    if na == 0.0 or nb == 0.0:
        raise DegenerateRankingError("degenerate ranking")
    return float(np.clip((ra @ rb) / (na * nb), -1.0, 1.0))


def affinity_slice(rdms: Sequence[np.ndarray]) -> np.ndarray:
    """N x N affinity matrix from one RDM per task at a single location"""
    n = len(rdms)
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = spearman_upper(rdms[i], rdms[j])
    return out


def task_affinity(features: Mapping[str, Sequence[np.ndarray]],
                  tasks: Sequence[str],
                  locations: Sequence[str],
                  n_jobs: int = Config.THREADS) -> AffinityTensor:
    """
    Compute the task-affinity tensor

    Args:
        features: task name -> one feature array per location, each with K rows
        tasks: task order of the output
        locations: location labels, one per feature array
        n_jobs: worker threads for RDM construction

    Returns:
        AffinityTensor with A[d, i, j] = spearman_upper(RDM_d^i, RDM_d^j)
    """
    tasks, locations = list(tasks), list(locations)
    if not tasks:
        raise DimensionError("need at least one task")
    for task in tasks:
        if task not in features:
            raise DimensionError(f"no features for task {task!r}")
        if len(features[task]) != len(locations):
            raise DimensionError(
                f"task {task!r} has {len(features[task])} locations, expected {len(locations)}"
            )

    for d, loc in enumerate(locations):
        counts = {task: np.shape(features[task][d])[0] for task in tasks}
        if len(set(counts.values())) > 1:
            raise DimensionError(f"image counts differ at location {loc!r}: {counts}")

    jobs = [(t, d) for t in range(len(tasks)) for d in range(len(locations))]
    logger.debug("building %d RDMs with %d job(s)", len(jobs), n_jobs)
    rdms = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(rdm_from_features)(features[tasks[t]][d]) for t, d in jobs
    )
    by_key = dict(zip(jobs, rdms))

    values = np.stack([
        affinity_slice([by_key[(t, d)] for t in range(len(tasks))])
        for d in range(len(locations))
    ])
    logger.info("affinity tensor ready: D=%d, N=%d", len(locations), len(tasks))
    return AffinityTensor(values, tasks, locations)


def format_affinity_table(affinity: AffinityTensor, precision: int = 4) -> str:
    """Render each location slice as an aligned text table"""
    width = max(max(len(t) for t in affinity.tasks), precision + 3)
    lines = []
    for d, loc in enumerate(affinity.locations):
        lines.append(f"[{loc}]")
        lines.append(' ' * width + ' ' + ' '.join(t.rjust(width) for t in affinity.tasks))
        for i, task in enumerate(affinity.tasks):
            cells = ' '.join(f"{v:{width}.{precision}f}" for v in affinity.values[d, i])
            lines.append(f"{task.rjust(width)} {cells}")
        lines.append('')
    return '\n'.join(lines).rstrip('\n')

"""
Central-difference checks for the analytic loss gradients
"""
import logging
from typing import Callable, Dict, Optional

import numpy as np
from tqdm import tqdm

from balancing import uncertainty_objective
from config import Config
from contrastive import contrastive_loss, knn_loss_arrays, l2_normalize

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-6


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                     epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Central differences of scalar f at x, one coordinate at a time"""
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat, out = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        hi = f(x)
        flat[i] = orig - epsilon
        lo = f(x)
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * epsilon)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), zero when both vanish"""
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def check_contrastive(rng: np.random.Generator, dim: int, num_negatives: int, temperature: float,
                      epsilon: float = DEFAULT_EPSILON, num_positives: int = 2) -> float:
    anchor = l2_normalize(rng.standard_normal(dim))
    pos = l2_normalize(rng.standard_normal((num_positives, dim)))
    neg = l2_normalize(rng.standard_normal((num_negatives, dim)))
    res = contrastive_loss(anchor, pos, neg, temperature)

    errors = [
        relative_error(res.grad_anchor, numeric_gradient(
            lambda a: contrastive_loss(a, pos, neg, temperature).loss, anchor, epsilon)),
        relative_error(res.grad_positives, numeric_gradient(
            lambda p: contrastive_loss(anchor, p, neg, temperature).loss, pos, epsilon)),
    ]
    if num_negatives:
        errors.append(relative_error(res.grad_negatives, numeric_gradient(
            lambda n: contrastive_loss(anchor, pos, n, temperature).loss, neg, epsilon)))
    return max(errors)


def check_knn(rng: np.random.Generator, dim: int, queue_size: int, temperature: float,
              epsilon: float = DEFAULT_EPSILON, k: Optional[int] = None) -> float:
    k = k if k is not None else min(Config.NUM_NEIGHBORS, queue_size)
    head = l2_normalize(rng.standard_normal(dim))
    entries = l2_normalize(rng.standard_normal((queue_size, dim)))
    indices = rng.choice(queue_size, size=k, replace=False)
    res = knn_loss_arrays(head, entries, indices, temperature)
    return max(
        relative_error(res.grad_positive, numeric_gradient(
            lambda h: knn_loss_arrays(h, entries, indices, temperature).loss, head, epsilon)),
        relative_error(res.grad_queue, numeric_gradient(
            lambda e: knn_loss_arrays(head, e, indices, temperature).loss, entries, epsilon)),
    )


def check_uncertainty(rng: np.random.Generator, num_tasks: int, epsilon: float = DEFAULT_EPSILON) -> float:
    losses = rng.uniform(0.1, 5.0, num_tasks)
    sigmas = rng.uniform(0.5, 2.0, num_tasks)
    res = uncertainty_objective(losses, sigmas)
    return relative_error(res.grad_sigma, numeric_gradient(
        lambda s: uncertainty_objective(losses, s).value, sigmas, epsilon))


def run_gradient_suite(instances: int = 200, dim: int = 8, queue_size: int = 16,
                       temperature: float = Config.TEMPERATURE, epsilon: float = DEFAULT_EPSILON,
                       seed: int = 0, progress: bool = False) -> Dict[str, float]:
    """
    Check every analytic gradient on random instances

    Returns:
        Largest relative error per loss over all instances
    """
    rng = np.random.default_rng(seed)
    worst = {'contrastive_loss': 0.0, 'knn_loss': 0.0, 'uncertainty_objective': 0.0}
    for _ in tqdm(range(instances), desc="gradient suite", disable=not progress):
        worst['contrastive_loss'] = max(worst['contrastive_loss'],
                                        check_contrastive(rng, dim, queue_size, temperature, epsilon))
        worst['knn_loss'] = max(worst['knn_loss'], check_knn(rng, dim, queue_size, temperature, epsilon))
        worst['uncertainty_objective'] = max(worst['uncertainty_objective'],
                                             check_uncertainty(rng, 4, epsilon))
    logger.info("gradient suite over %d instances: %s", instances, worst)
    return worst

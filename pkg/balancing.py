"""
Task-balancing strategies

Every strategy is a deterministic map from loss/gradient history to per-task
weights. Nothing here trains a network: callers feed recorded traces and use
the weights (or objective values) that come back.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy.special import softmax

from config import Config
from errors import DimensionError, DomainError, MissingHistoryError
from tensor_io import MetricReport, TaskTrace

logger = logging.getLogger(__name__)

ArrayLike = Union[Sequence[float], np.ndarray]

STRATEGIES = ('fixed', 'uncertainty', 'gradnorm', 'dwa', 'dtp', 'magnitude', 'periodic', 'mgda')


@dataclass
class WeightVector:
    """Per-task weights tagged with the strategy and iteration that produced them"""

    weights: np.ndarray
    strategy: str = 'fixed'
    iteration: Optional[int] = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise DomainError(f"weights must be finite and non-negative, got {self.weights}")

    def __len__(self) -> int:
        return self.weights.size

    def normalized(self, total: float) -> 'WeightVector':
        s = self.weights.sum()
        if s <= 0:
            raise DomainError("cannot renormalize an all-zero weight vector")
        return WeightVector(self.weights * (total / s), self.strategy, self.iteration)


@dataclass
class GradSnapshot:
    """Per-task shared-parameter gradients, as full vectors or as magnitudes only"""

    vectors: Optional[np.ndarray] = None
    magnitudes: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.vectors is None and self.magnitudes is None:
            raise DimensionError("snapshot needs gradient vectors or magnitudes")
        if self.vectors is not None:
            self.vectors = np.asarray(self.vectors, dtype=np.float64)
            if self.vectors.ndim < 2:
                raise DimensionError("gradient vectors need a leading task axis")
            if not np.all(np.isfinite(self.vectors)):
                raise DomainError("gradients contain non-finite values")
        if self.magnitudes is not None:
            self.magnitudes = np.asarray(self.magnitudes, dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(self.magnitudes)) or np.any(self.magnitudes < 0):
                raise DomainError("gradient magnitudes must be finite and non-negative")

    @property
    def num_tasks(self) -> int:
        return self.vectors.shape[0] if self.vectors is not None else self.magnitudes.size

    def flat(self) -> np.ndarray:
        if self.vectors is None:
            raise DimensionError("operation needs full gradient vectors")
        return self.vectors.reshape(self.vectors.shape[0], -1)

    def norms(self) -> np.ndarray:
        if self.magnitudes is not None:
            return self.magnitudes
        return np.linalg.norm(self.flat(), axis=1)


def _vector(values: ArrayLike, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} must be finite")
    return arr


def _same_length(a: np.ndarray, b: np.ndarray, what: str):
    if a.size != b.size:
        raise DimensionError(f"{what}: length {a.size} != {b.size}")


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def weighted_mtl_loss(weights: Union[WeightVector, ArrayLike], losses: ArrayLike) -> float:
    """Sum of w_i * L_i"""
    w = weights.weights if isinstance(weights, WeightVector) else _vector(weights, 'weights')
    l = _vector(losses, 'losses')
    _same_length(w, l, 'weights vs losses')
    return float(w @ l)


class UncertaintyResult(NamedTuple):
    value: float
    grad_sigma: np.ndarray
    effective_weights: np.ndarray


def uncertainty_objective(losses: ArrayLike, sigmas: ArrayLike) -> UncertaintyResult:
    """
    Homoscedastic uncertainty weighting, N-task form

    value = sum L_i / (2 sigma_i^2) + sum log sigma_i
    """
    l = _vector(losses, 'losses')
    s = _vector(sigmas, 'sigmas')
    _same_length(l, s, 'losses vs sigmas')
    if np.any(s <= 0):
        raise DomainError("sigmas must be strictly positive")

    effective = 1.0 / (2.0 * s ** 2)
    value = float(effective @ l + np.log(s).sum())
    grad = -l / s ** 3 + 1.0 / s
    return UncertaintyResult(value, grad, effective)


def optimal_sigmas(losses: ArrayLike, floor: float = Config.MIN_SIGMA) -> np.ndarray:
    """
    Closed-form minimiser of the uncertainty objective: sigma_i^2 = L_i

    Sigmas are floored at `floor`, so a zero loss gets the largest finite weight.
    """
    l = _vector(losses, 'losses')
    if np.any(l < 0):
        raise DomainError("optimal sigmas need non-negative losses")
    if not floor > 0:
        raise DomainError(f"sigma floor must be positive, got {floor}")
    return np.maximum(np.sqrt(l), floor)


# ---------------------------------------------------------------------------
# GradNorm
# ---------------------------------------------------------------------------

class GradNormResult(NamedTuple):
    objective: np.ndarray
    inverse_rates: np.ndarray
    relative_rates: np.ndarray
    weights: WeightVector


def _initial_losses(trace: TaskTrace) -> np.ndarray:
    if not trace.has_iteration(0):
        raise MissingHistoryError("GradNorm needs the iteration-0 losses")
    l0 = trace.losses_at(0)
    if np.any(l0 <= 0):
        zero = [trace.tasks[i] for i in np.flatnonzero(l0 <= 0)]
        raise DomainError(f"iteration-0 loss is zero for: {', '.join(zero)}")
    return l0


def gradnorm_step(trace: TaskTrace, grads: GradSnapshot, weights: Union[WeightVector, ArrayLike],
                  iteration: int) -> GradNormResult:
    """
    Evaluate the GradNorm balance at `iteration`

    Args:
        trace: loss history holding iterations 0 and `iteration`
        grads: weighted gradient magnitudes G_i at `iteration`
        weights: current task weights, renormalized to sum to N

    Returns:
        per-task |G_i - mean(G) r_i|, the inverse training rates L_i(t)/L_i(0),
        the relative rates r_i, and the renormalized weights
    """
    l0 = _initial_losses(trace)
    lt = trace.losses_at(iteration)
    g = grads.norms()
    _same_length(g, lt, 'gradients vs tasks')

    inverse = lt / l0
    relative = inverse / inverse.mean()
    objective = np.abs(g - g.mean() * relative)

    w = weights if isinstance(weights, WeightVector) else WeightVector(weights, 'gradnorm', iteration)
    _same_length(w.weights, lt, 'weights vs tasks')
    renorm = WeightVector(w.weights, 'gradnorm', iteration).normalized(float(trace.num_tasks))
    return GradNormResult(objective, inverse, relative, renorm)


def gradnorm_update(trace: TaskTrace, raw_grad_norms: ArrayLike, weights: Union[WeightVector, ArrayLike],
                    iteration: int, learning_rate: float = Config.GRADNORM_LR) -> WeightVector:
    """
    One GradNorm task-weight step

    G_i = w_i * ||grad L_i||; the target mean(G) r_i is held constant, so the
    L1 balance objective has gradient sign(G_i - target_i) * ||grad L_i|| in w_i.
    Weights are clipped at zero and renormalized to sum N.
    """
    w = weights.weights if isinstance(weights, WeightVector) else _vector(weights, 'weights')
    raw = _vector(raw_grad_norms, 'gradient norms')
    if np.any(raw < 0):
        raise DomainError("gradient norms must be non-negative")
    _same_length(w, raw, 'weights vs gradient norms')

    g = w * raw
    step = gradnorm_step(trace, GradSnapshot(magnitudes=g), w, iteration)
    target = g.mean() * step.relative_rates
    updated = np.clip(w - learning_rate * np.sign(g - target) * raw, 0.0, None)
    if updated.sum() <= 0:
        updated = np.ones_like(updated)
    return WeightVector(updated, 'gradnorm', iteration).normalized(float(len(updated)))


# ---------------------------------------------------------------------------
# Loss-history strategies
# ---------------------------------------------------------------------------

def dwa_weights(trace: TaskTrace, iteration: int, temperature: float = Config.DWA_TEMPERATURE) -> WeightVector:
    """
    Dynamic weight averaging from the two preceding iterations

    r_n = L_n(t-1) / L_n(t-2); w = N * softmax(r / T)
    """
    if temperature <= 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    prev, prev2 = iteration - 1, iteration - 2
    if prev2 < 0 or not trace.has_iteration(prev) or not trace.has_iteration(prev2):
        raise MissingHistoryError(
            f"DWA at iteration {iteration} needs iterations {prev2} and {prev}; "
            "use fixed weights for the first two iterations"
        )
    return dwa_from_losses(trace.losses_at(prev), trace.losses_at(prev2), temperature, iteration)


def dwa_from_losses(previous: ArrayLike, before_previous: ArrayLike, temperature: float = Config.DWA_TEMPERATURE,
                    iteration: Optional[int] = None) -> WeightVector:
    """DWA weights from the two loss vectors preceding `iteration`, oldest second"""
    if temperature <= 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    l1 = _vector(previous, 'losses')
    l2 = _vector(before_previous, 'losses')
    _same_length(l1, l2, 'loss vectors')
    if np.any(l2 <= 0):
        raise DomainError("earlier losses must be strictly positive")
    w = l1.size * softmax((l1 / l2) / temperature)
    return WeightVector(w, 'dwa', iteration)


def dtp_weights(kpis: ArrayLike, focusing: Union[float, ArrayLike] = 1.0,
                iteration: Optional[int] = None) -> WeightVector:
    """Focal-style priorities w_i = -(1 - kappa_i)^gamma_i * log(kappa_i)"""
    k = _vector(kpis, 'kpis')
    gamma = _vector(focusing, 'focusing')
    if gamma.size == 1:
        gamma = np.full(k.shape, gamma[0])
    _same_length(k, gamma, 'kpis vs focusing parameters')
    if np.any((k <= 0) | (k >= 1)):
        raise DomainError(f"KPIs must lie strictly inside (0, 1), got {k}")
    if np.any(gamma < 0):
        raise DomainError("focusing parameters must be non-negative")
    return WeightVector(-((1.0 - k) ** gamma) * np.log(k), 'dtp', iteration)


def magnitude_heuristic_weights(avg_losses: ArrayLike, iteration: Optional[int] = None) -> WeightVector:
    """Scale every task so w_i * mean(L_i) equals the largest mean loss"""
    l = _vector(avg_losses, 'average losses')
    if np.any(l <= 0):
        raise DomainError("average losses must be strictly positive")
    return WeightVector(l.max() / l, 'magnitude', iteration)


def fixed_weights(num_tasks: int, weights: Optional[ArrayLike] = None,
                  iteration: Optional[int] = None) -> WeightVector:
    """Uniform weights, or the caller's fixed weights checked against the task count"""
    if weights is None:
        return WeightVector(np.ones(num_tasks), 'fixed', iteration)
    w = _vector(weights, 'weights')
    if w.size != num_tasks:
        raise DimensionError(f"{w.size} fixed weights for {num_tasks} tasks")
    return WeightVector(w, 'fixed', iteration)


def loss_group_weights(avg_losses: ArrayLike, groups: Sequence[str],
                       iteration: Optional[int] = None) -> WeightVector:
    """
    Tasks with the same loss function share a weight

    Each group's weight equalises its mean loss against the largest group mean.
    """
    l = _vector(avg_losses, 'average losses')
    if len(groups) != l.size:
        raise DimensionError(f"{len(groups)} group labels for {l.size} tasks")
    names = list(dict.fromkeys(groups))
    means = np.array([l[[g == name for g in groups]].mean() for name in names])
    group_w = magnitude_heuristic_weights(means).weights
    lookup = dict(zip(names, group_w))
    return WeightVector([lookup[g] for g in groups], 'magnitude', iteration)


def importance_weights(base: WeightVector, importance: ArrayLike) -> WeightVector:
    """Multiply balanced weights by per-task importance factors"""
    f = _vector(importance, 'importance factors')
    _same_length(base.weights, f, 'weights vs importance factors')
    if np.any(f < 0):
        raise DomainError("importance factors must be non-negative")
    return WeightVector(base.weights * f, base.strategy, base.iteration)


def _mean_losses(trace: TaskTrace, iterations: Sequence[int]) -> np.ndarray:
    return np.mean([trace.losses_at(t) for t in iterations], axis=0)


def periodic_magnitude_weights(trace: TaskTrace, iteration: int, window: int, every: int) -> WeightVector:
    """
    Re-run the magnitude heuristic every `every` iterations

    The refresh point is the latest multiple of `every` not after `iteration`;
    the mean losses come from the recorded iterations in the trailing window
    ending at that point.
    """
    if window < 1 or every < 1:
        raise DomainError("window and refresh period must be >= 1")
    refresh = (iteration // every) * every
    span = [t for t in trace.iterations() if refresh - window < t <= refresh]
    if not span:
        raise MissingHistoryError(f"no recorded iterations in window ending at {refresh}")
    w = magnitude_heuristic_weights(_mean_losses(trace, span)).weights
    return WeightVector(w, 'periodic', iteration)


# ---------------------------------------------------------------------------
# MGDA
# ---------------------------------------------------------------------------

class MinNormResult(NamedTuple):
    alphas: np.ndarray
    direction: np.ndarray
    norm: float
    history: List[float]


def _line_search(alpha: np.ndarray, d: np.ndarray, gram: np.ndarray, gamma_max: float) -> float:
    """Exact minimiser of ||sum (alpha + g d)_i grad_i||^2 over g in [0, gamma_max]"""
    curvature = d @ gram @ d
    slope = alpha @ gram @ d
    if curvature <= 0:
        return gamma_max if slope < 0 else 0.0
    return float(np.clip(-slope / curvature, 0.0, gamma_max))


def _polish(alpha: np.ndarray, gram: np.ndarray) -> Optional[np.ndarray]:
    """Solve the equality-constrained problem on the current support exactly"""
    support = np.flatnonzero(alpha > 1e-12)
    if support.size < 2:
        return None
    sub = gram[np.ix_(support, support)]
    x, *_ = np.linalg.lstsq(sub, np.ones(support.size), rcond=None)
    if x.sum() <= 0 or np.any(x <= 0):
        return None
    out = np.zeros_like(alpha)
    out[support] = x / x.sum()
    return out


def mgda_min_norm(grads: Union[GradSnapshot, np.ndarray], tol: float = Config.MGDA_TOL,
                  max_iter: Optional[int] = None) -> MinNormResult:
    """
    Min-norm element of the convex hull of task gradients

    Frank-Wolfe on the Gram matrix from uniform alphas. Each step moves toward
    the best vertex, or away from the worst vertex in the support when that
    gap is larger, with the closed-form two-point line search. Stops once the
    Frank-Wolfe gap (the largest achievable decrease) drops below `tol` or
    after 10 N^2 iterations. A zero norm marks a Pareto-stationary point.
    """
    snapshot = grads if isinstance(grads, GradSnapshot) else GradSnapshot(vectors=grads)
    g = snapshot.flat()
    n = g.shape[0]
    if n < 2:
        raise DimensionError(f"MGDA needs at least 2 tasks, got {n}")
    gram = g @ g.T
    max_iter = max_iter if max_iter is not None else 10 * n * n

    alpha = np.full(n, 1.0 / n)
    history = [math.sqrt(max(alpha @ gram @ alpha, 0.0))]
    for _ in range(max_iter):
        mixed = gram @ alpha
        sq = alpha @ mixed
        s = int(np.argmin(mixed))
        fw_gap = sq - mixed[s]
        if fw_gap <= tol:
            break

        support = np.flatnonzero(alpha > 0)
        v = int(support[np.argmax(mixed[support])])
        away_gap = mixed[v] - sq

        if fw_gap >= away_gap or alpha[v] >= 1.0:
            d = -alpha.copy()
            d[s] += 1.0
            gamma = _line_search(alpha, d, gram, 1.0)
        else:
            d = alpha.copy()
            d[v] -= 1.0
            gamma = _line_search(alpha, d, gram, alpha[v] / (1.0 - alpha[v]))

        candidate = np.clip(alpha + gamma * d, 0.0, None)
        candidate /= candidate.sum()
        norm = math.sqrt(max(candidate @ gram @ candidate, 0.0))
        if norm > history[-1]:
            break
        alpha = candidate
        history.append(norm)
    logger.debug("min-norm solver: %d iterations, norm %.3e", len(history) - 1, history[-1])

    polished = _polish(alpha, gram)
    if polished is not None:
        norm = math.sqrt(max(polished @ gram @ polished, 0.0))
        if norm <= history[-1]:
            alpha = polished
            history.append(norm)

    direction = (alpha @ g).reshape(snapshot.vectors.shape[1:])
    return MinNormResult(alpha, direction, float(np.linalg.norm(direction)), history)


# ---------------------------------------------------------------------------
# Metric
# ---------------------------------------------------------------------------

def delta_mtl(model: MetricReport, baseline: MetricReport) -> float:
    """
    Average per-task relative change against the baseline, in percent

    Lower-is-better metrics count a decrease as an improvement. Tasks are
    matched by name.
    """
    if sorted(model.tasks) != sorted(baseline.tasks):
        raise DimensionError(f"task sets differ: {model.tasks} vs {baseline.tasks}")
    order = [baseline.tasks.index(t) for t in model.tasks]
    mb = baseline.values[order]
    if np.any(mb == 0):
        raise DomainError("baseline metric is zero; relative change is undefined")
    sign = np.where(model.lower_is_better == 1, -1.0, 1.0)
    return float(100.0 * np.mean(sign * (model.values - mb) / mb))


def format_percent(value: float) -> str:
    """Two-decimal percentage; a rounded zero never carries a sign"""
    text = f"{value:+.2f}%"
    return "0.00%" if text in ("+0.00%", "-0.00%") else text


# ---------------------------------------------------------------------------
# Schedules over a trace
# ---------------------------------------------------------------------------

@dataclass
class BalanceSettings:
    strategy: str = 'fixed'
    weights: Optional[List[float]] = None
    temperature: float = Config.DWA_TEMPERATURE
    sigmas: Optional[List[float]] = None
    learning_rate: float = Config.GRADNORM_LR
    kpis: Optional[Dict[int, np.ndarray]] = None
    gamma: Union[float, List[float]] = 1.0
    window: int = 1
    every: int = 1
    importance: Optional[List[float]] = None
    gradients: Optional[np.ndarray] = None
    groups: Optional[List[str]] = field(default=None)


def weight_schedule(trace: TaskTrace, settings: BalanceSettings) -> List[WeightVector]:
    """Weights for every recorded iteration of the trace under one strategy"""
    strategy = settings.strategy
    if strategy not in STRATEGIES:
        raise DomainError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")

    n = trace.num_tasks
    iterations = trace.iterations()
    out: List[WeightVector] = []
    current = fixed_weights(n, settings.weights).weights

    for step, t in enumerate(iterations):
        if strategy == 'fixed':
            wv = fixed_weights(n, settings.weights, t)
        elif strategy == 'uncertainty':
            sigmas = settings.sigmas if settings.sigmas is not None else optimal_sigmas(trace.losses_at(t))
            wv = WeightVector(uncertainty_objective(trace.losses_at(t), sigmas).effective_weights, strategy, t)
        elif strategy == 'gradnorm':
            wv = WeightVector(current, strategy, t).normalized(float(n))
            current = gradnorm_update(trace, trace.grad_norms_at(t), current, t, settings.learning_rate).weights
        elif strategy == 'dwa':
            # warm-up: the first two recorded iterations lack history
            if step < 2:
                wv = WeightVector(np.ones(n), strategy, t)
            else:
                wv = dwa_from_losses(trace.losses_at(iterations[step - 1]), trace.losses_at(iterations[step - 2]),
                                     settings.temperature, t)
        elif strategy == 'dtp':
            if settings.kpis is None or t not in settings.kpis:
                raise MissingHistoryError(f"no KPIs for iteration {t}")
            wv = dtp_weights(settings.kpis[t], settings.gamma, t)
        elif strategy == 'magnitude':
            seen = [s for s in iterations if s <= t]
            mean = _mean_losses(trace, seen)
            wv = (loss_group_weights(mean, settings.groups, t) if settings.groups
                  else magnitude_heuristic_weights(mean, t))
        elif strategy == 'periodic':
            wv = periodic_magnitude_weights(trace, t, settings.window, settings.every)
        else:
            if settings.gradients is None or settings.gradients.shape[0] <= step:
                raise MissingHistoryError(f"no gradient vectors for iteration {t}")
            if settings.gradients.shape[1] != n:
                raise DimensionError(f"gradients carry {settings.gradients.shape[1]} tasks, trace has {n}")
            wv = WeightVector(mgda_min_norm(settings.gradients[step]).alphas, strategy, t)

        if settings.importance is not None:
            wv = importance_weights(wv, settings.importance)
        out.append(wv)

    logger.info("%s weights for %d iterations", strategy, len(out))
    return out

"""
Contrastive and nearest-neighbour loss numerics with momentum queues

Embeddings are unit vectors on the hypersphere. Gradients are taken with
respect to the unit vectors as free variables; there is no encoder here.
"""
import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from config import Config
from errors import DimensionError, DomainError, QueueError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ContrastiveConfig:
    """Loss and key-encoder settings; multi-crop training uses the lower key momentum by default"""

    temperature: float = Config.TEMPERATURE
    momentum: Optional[float] = None
    num_neighbors: int = Config.NUM_NEIGHBORS
    nn_weight: float = Config.NN_WEIGHT
    multicrop: bool = False

    def __post_init__(self):
        if self.momentum is None:
            default = Config.MULTICROP_MOMENTUM if self.multicrop else Config.MOMENTUM
            object.__setattr__(self, 'momentum', default)
        if not self.temperature > 0:
            raise DomainError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.momentum <= 1.0:
            raise DomainError(f"momentum must be in [0, 1], got {self.momentum}")
        if self.num_neighbors < 1:
            raise DomainError(f"neighbour count must be >= 1, got {self.num_neighbors}")
        if self.nn_weight < 0:
            raise DomainError(f"auxiliary weight must be >= 0, got {self.nn_weight}")

    def update_keys(self, slow: np.ndarray, fast: np.ndarray) -> np.ndarray:
        return momentum_update(slow, fast, self.momentum)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Project a vector (or each row of a matrix) onto the unit sphere"""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DomainError("cannot normalize a zero vector")
    return v / norms


def _check_temperature(tau: float):
    if not tau > 0:
        raise DomainError(f"temperature must be > 0, got {tau}")


def _rows(x: np.ndarray, dim: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return np.zeros((0, dim))
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise DimensionError(f"{name} have shape {x.shape}, expected rows of dimension {dim}")
    return x


class ContrastiveResult(NamedTuple):
    loss: float
    grad_anchor: np.ndarray
    grad_positives: np.ndarray
    grad_negatives: np.ndarray


def contrastive_loss(anchor: np.ndarray, positives: np.ndarray, negatives: np.ndarray,
                     temperature: float = Config.TEMPERATURE) -> ContrastiveResult:
    """
    -sum over positives of log(e^{a.p/t} / (e^{a.p/t} + sum_n e^{a.n/t}))

    Returns the loss and its gradients with respect to the anchor, each
    positive and each negative.
    """
    _check_temperature(temperature)
    a = np.asarray(anchor, dtype=np.float64).reshape(-1)
    pos = _rows(positives, a.size, 'positives')
    neg = _rows(negatives, a.size, 'negatives')
    if pos.shape[0] == 0:
        raise DimensionError("contrastive loss needs at least one positive")

    s_pos = pos @ a / temperature
    s_neg = neg @ a / temperature
    # one row per positive: [s_p, s_n1, ..., s_nM]
    logits = np.concatenate([s_pos[:, None], np.broadcast_to(s_neg, (pos.shape[0], neg.shape[0]))], axis=1)
    loss = float(np.sum(logsumexp(logits, axis=1) - s_pos))

    pi = softmax(logits, axis=1)
    d_pos = pi[:, 0] - 1.0
    d_neg = pi[:, 1:].sum(axis=0)
    grad_anchor = (d_pos @ pos + d_neg @ neg) / temperature
    grad_pos = np.outer(d_pos, a) / temperature
    grad_neg = np.outer(d_neg, a) / temperature
    return ContrastiveResult(loss, grad_anchor, grad_pos, grad_neg)


def momentum_update(slow: np.ndarray, fast: np.ndarray, momentum: float = Config.MOMENTUM) -> np.ndarray:
    """m * slow + (1 - m) * fast"""
    slow = np.asarray(slow, dtype=np.float64)
    fast = np.asarray(fast, dtype=np.float64)
    if slow.shape != fast.shape:
        raise DimensionError(f"shape mismatch: {slow.shape} vs {fast.shape}")
    if not 0.0 <= momentum <= 1.0:
        raise DomainError(f"momentum must be in [0, 1], got {momentum}")
    if momentum == 1.0:
        return slow.copy()
    if momentum == 0.0:
        return fast.copy()
    return momentum * slow + (1.0 - momentum) * fast


def _check_unit(batch: np.ndarray, name: str):
    norms = np.linalg.norm(batch, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > Config.UNIT_NORM_TOL)
    if bad.size:
        raise QueueError(f"{name} row {int(bad[0])} has norm {norms[bad[0]]:.9f}; expected unit norm")


@dataclass(frozen=True, eq=False)
class EmbeddingQueue:
    """
    Fixed-capacity FIFO of unit embeddings, oldest first

    A dual queue also stores backbone-space embeddings aligned row-for-row
    with the head-space ones; both evict together.
    """

    capacity: int
    head: np.ndarray
    backbone: Optional[np.ndarray] = None

    @classmethod
    def empty(cls, capacity: int, dim: int, backbone_dim: Optional[int] = None) -> 'EmbeddingQueue':
        if capacity < 1:
            raise QueueError(f"capacity must be >= 1, got {capacity}")
        backbone = np.zeros((0, backbone_dim)) if backbone_dim is not None else None
        return cls(capacity, np.zeros((0, dim)), backbone)

    @property
    def is_dual(self) -> bool:
        return self.backbone is not None

    @property
    def dim(self) -> int:
        return self.head.shape[1]

    def __len__(self) -> int:
        return self.head.shape[0]

    def push(self, head_batch: np.ndarray, backbone_batch: Optional[np.ndarray] = None) -> 'EmbeddingQueue':
        return queue_push(self, head_batch, backbone_batch)


def queue_push(queue: EmbeddingQueue, head_batch: np.ndarray,
               backbone_batch: Optional[np.ndarray] = None) -> EmbeddingQueue:
    """Append a batch and evict the oldest entries beyond capacity"""
    head_batch = _rows(head_batch, queue.dim, 'head batch')
    _check_unit(head_batch, 'head batch')

    backbone = None
    if queue.is_dual:
        if backbone_batch is None:
            raise QueueError("dual queue needs a backbone batch")
        backbone_batch = _rows(backbone_batch, queue.backbone.shape[1], 'backbone batch')
        if backbone_batch.shape[0] != head_batch.shape[0]:
            raise QueueError(
                f"misaligned dual batch: {head_batch.shape[0]} head vs {backbone_batch.shape[0]} backbone rows"
            )
        _check_unit(backbone_batch, 'backbone batch')
        backbone = np.concatenate([queue.backbone, backbone_batch])[-queue.capacity:]
    elif backbone_batch is not None:
        raise QueueError("backbone batch pushed to a single queue")

    head = np.concatenate([queue.head, head_batch])[-queue.capacity:]
    head.setflags(write=False)
    if backbone is not None:
        backbone.setflags(write=False)
    return EmbeddingQueue(queue.capacity, head, backbone)


def mine_neighbors(query_backbone: np.ndarray, queue: EmbeddingQueue, k: int) -> np.ndarray:
    """Indices of the k most similar backbone entries, descending; ties go to the lower index"""
    if not queue.is_dual:
        raise QueueError("neighbour mining needs a dual queue")
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    if k > len(queue):
        raise QueueError(f"k={k} exceeds queue length {len(queue)}")
    query = _rows(np.asarray(query_backbone, dtype=np.float64).reshape(-1), queue.backbone.shape[1], 'query')
    _check_unit(query, 'query')

    sims = queue.backbone @ query[0]
    order = np.lexsort((np.arange(sims.size), -sims))
    return order[:k]


class KnnResult(NamedTuple):
    loss: float
    grad_positive: np.ndarray
    grad_queue: np.ndarray


def knn_loss_from_logits(logits: np.ndarray, indices: Sequence[int],
                         temperature: float = Config.TEMPERATURE) -> float:
    """Mean cross-entropy of the neighbour slots under a softmax over all logits / t"""
    _check_temperature(temperature)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise DimensionError("neighbour index set is empty")
    z = np.asarray(logits, dtype=np.float64) / temperature
    return float(logsumexp(z) - z[idx].mean())


def knn_loss_arrays(positive_head: np.ndarray, head_entries: np.ndarray, indices: Sequence[int],
                    temperature: float = Config.TEMPERATURE) -> KnnResult:
    """kNN loss on raw arrays, no unit-norm checks"""
    _check_temperature(temperature)
    h = np.asarray(positive_head, dtype=np.float64).reshape(-1)
    entries = _rows(head_entries, h.size, 'queue entries')
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise DimensionError("neighbour index set is empty")
    if np.any((idx < 0) | (idx >= entries.shape[0])):
        raise DimensionError(f"neighbour index out of range for queue of {entries.shape[0]}")

    z = entries @ h / temperature
    loss = float(logsumexp(z) - z[idx].mean())
    dz = softmax(z) - np.bincount(idx, minlength=z.size) / idx.size
    return KnnResult(loss, dz @ entries / temperature, np.outer(dz, h) / temperature)


def knn_loss(positive_head: np.ndarray, queue: EmbeddingQueue, indices: Sequence[int],
             temperature: float = Config.TEMPERATURE) -> KnnResult:
    """
    Nearest-neighbour loss over the head-space queue

    Logits are positive_head . entry_j for every queued entry; the loss is the
    mean over neighbour indices of -log softmax(logits / t)_j.
    """
    return knn_loss_arrays(positive_head, queue.head, indices, temperature)


def moco_instance_loss(query: np.ndarray, key: np.ndarray, queue: EmbeddingQueue,
                       temperature: float = Config.TEMPERATURE) -> ContrastiveResult:
    """Instance discrimination: the key is the positive, queued entries are negatives"""
    return contrastive_loss(query, np.asarray(key)[None, :], queue.head, temperature)


def total_ssl_loss(inst: float, nn: float, nn_weight: float = Config.NN_WEIGHT) -> float:
    """Instance loss plus weighted neighbour loss"""
    if nn_weight < 0:
        raise DomainError(f"auxiliary weight must be >= 0, got {nn_weight}")
    return float(inst + nn_weight * nn)

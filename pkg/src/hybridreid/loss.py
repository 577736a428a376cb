"""Contrastive losses over memory banks and their analytic gradients with
respect to the query embedding.

Gradients flow to the query only; bank entries are fixed state, and hard
positive/negative selection is a stop-gradient operation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import NumericError
from .memory import ClusterBank, InstanceBank, hard_keys


@dataclass
class LossOutput:
    """Scalar loss value and its gradient w.r.t. the (unit-norm) query."""

    value: float
    grad_query: np.ndarray


def softmax_contrastive(query, keys, positive_index: int, tau: float) -> LossOutput:
    """Softmax cross-entropy over similarity logits ``<query, key_i> / tau``.

    Returns ``-log softmax(logits)[positive_index]`` and its gradient
    ``(sum_i p_i key_i - key_positive) / tau``. Logits are max-shifted, so
    the value is finite and >= 0 even at small temperatures.
    """
    query = np.asarray(query, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    m = keys.shape[0]
    if not 0 <= positive_index < m:
        raise ValueError(f"positive_index {positive_index} out of range for {m} keys")
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    logits = keys @ query / tau
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite similarity logits")
    shift = logits.max()
    exp = np.exp(logits - shift)
    total = exp.sum()
    p = exp / total
    value = float((shift - logits[positive_index]) + np.log(total))
    grad = (p @ keys - keys[positive_index]) / tau
    return LossOutput(value=value, grad_query=grad)


def cluster_loss(query, bank: ClusterBank, own_cluster: int, tau_c: float) -> LossOutput:
    """Contrastive loss against all cluster centroids; the query's own
    centroid is the positive."""
    bank.read_count += 1
    return softmax_contrastive(query, bank.centroids, own_cluster, tau_c)


def hard_instance_loss(
    query, bank: InstanceBank, own_cluster: int, tau_ins: float
) -> LossOutput:
    """Contrastive loss over one hard key per cluster.

    The positive is the own-cluster slot least similar to the query; every
    other cluster contributes its most similar slot as a negative.
    """
    bank.read_count += 1
    _, keys = hard_keys(query, bank, own_cluster)
    return softmax_contrastive(query, keys, own_cluster, tau_ins)


def hybrid_loss(cls: LossOutput, ins: LossOutput, mu: float) -> LossOutput:
    """Convex blend ``mu * cls + (1 - mu) * ins`` of value and gradient."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"mu must be in [0, 1], got {mu}")
    return LossOutput(
        value=mu * cls.value + (1.0 - mu) * ins.value,
        grad_query=mu * cls.grad_query + (1.0 - mu) * ins.grad_query,
    )

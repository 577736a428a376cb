"""Dual memory banks: per-cluster centroids with momentum updates and
per-cluster instance slots with replacement updates plus hard positive /
hard negative selection."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import PseudoLabeling

# Mean vectors shorter than this are treated as degenerate (e.g. the mean
# of two antipodal unit vectors).
DEGENERATE_NORM = 1e-12


@dataclass
class ClusterBank:
    """C x D unit-norm cluster centroids with momentum coefficient alpha."""

    centroids: np.ndarray
    alpha: float
    read_count: int = 0

    @property
    def num_clusters(self) -> int:
        return int(self.centroids.shape[0])


@dataclass
class InstanceBank:
    """C x S x D unit-norm instance features, S slots per cluster."""

    slots: np.ndarray
    cursors: np.ndarray = field(default=None)
    read_count: int = 0

    def __post_init__(self):
        if self.cursors is None:
            self.cursors = np.zeros(self.slots.shape[0], dtype=np.int64)

    @property
    def num_clusters(self) -> int:
        return int(self.slots.shape[0])

    @property
    def slots_per_cluster(self) -> int:
        return int(self.slots.shape[1])


def init_cluster_bank(emb, labels: PseudoLabeling, alpha: float) -> ClusterBank:
    """Centroid i = normalized mean of cluster i's embeddings; outliers excluded."""
    emb = np.asarray(emb, dtype=np.float64)
    c, d = labels.num_clusters, emb.shape[1]
    centroids = np.zeros((c, d), dtype=np.float64)
    for i in range(c):
        members = labels.members_of(i)
        if members.size == 0:
            raise ValueError(f"cluster {i} has no members")
        mean = emb[members].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < DEGENERATE_NORM:
            raise ValueError(f"cluster {i} has a degenerate (zero) mean")
        centroids[i] = mean / norm
    return ClusterBank(centroids=centroids, alpha=alpha)


def update_cluster_bank(bank: ClusterBank, batch_emb, batch_labels):
    """Momentum update: c_i <- alpha*c_i + (1-alpha)*mean_i, then renormalize.

    Only clusters present in the batch are touched. alpha = 1 is an exact
    no-op, so the stored rows are left bit-identical.
    """
    batch_emb = np.asarray(batch_emb, dtype=np.float64)
    batch_labels = np.asarray(batch_labels, dtype=np.int64)
    if np.any((batch_labels < 0) | (batch_labels >= bank.num_clusters)):
        raise ValueError("batch labels contain invalid cluster ids")
    if bank.alpha == 1.0:
        return
    for i in np.unique(batch_labels):
        cbar = batch_emb[batch_labels == i].mean(axis=0)
        merged = bank.alpha * bank.centroids[i] + (1.0 - bank.alpha) * cbar
        norm = np.linalg.norm(merged)
        if norm < DEGENERATE_NORM:
            warnings.warn(
                f"cluster {i}: degenerate mean in momentum update, keeping "
                "previous centroid",
                RuntimeWarning,
            )
            continue
        bank.centroids[i] = merged / norm


def init_instance_bank(emb, labels: PseudoLabeling, slots: int, rng_seed) -> InstanceBank:
    """Fill S slots per cluster by uniform sampling of its members.

    Sampling is without replacement when the cluster has at least S
    members and with replacement otherwise.
    """
    if slots < 1:
        raise ValueError(f"slots must be >= 1, got {slots}")
    emb = np.asarray(emb, dtype=np.float64)
    rng = np.random.default_rng(rng_seed)
    c, d = labels.num_clusters, emb.shape[1]
    bank = np.zeros((c, slots, d), dtype=np.float64)
    for i in range(c):
        members = labels.members_of(i)
        if members.size == 0:
            raise ValueError(f"cluster {i} has no members")
        idx = rng.choice(members, size=slots, replace=members.size < slots)
        bank[i] = emb[idx]
    return InstanceBank(slots=bank)


def update_instance_bank(bank: InstanceBank, batch_emb, batch_labels):
    """Replace stored slots of every cluster present in the batch.

    Batch instances overwrite slots round-robin from a per-cluster cursor
    that persists across iterations; with exactly S instances per cluster
    this reduces to slot k <- batch instance k.
    """
    batch_emb = np.asarray(batch_emb, dtype=np.float64)
    batch_labels = np.asarray(batch_labels, dtype=np.int64)
    if np.any((batch_labels < 0) | (batch_labels >= bank.num_clusters)):
        raise ValueError("batch labels contain invalid cluster ids")
    s = bank.slots_per_cluster
    for i in np.unique(batch_labels):
        rows = np.flatnonzero(batch_labels == i)
        start = int(bank.cursors[i])
        positions = (start + np.arange(rows.size)) % s
        bank.slots[i, positions] = batch_emb[rows]
        bank.cursors[i] = (start + rows.size) % s


def select_hard_positive(query, bank: InstanceBank, own_cluster: int):
    """Slot of ``own_cluster`` least similar to the query (ties: lowest index)."""
    sims = bank.slots[own_cluster] @ np.asarray(query, dtype=np.float64)
    idx = int(np.argmin(sims))
    return idx, bank.slots[own_cluster, idx].copy()


def select_hard_negative(query, bank: InstanceBank, other_cluster: int):
    """Slot of ``other_cluster`` most similar to the query (ties: lowest index)."""
    sims = bank.slots[other_cluster] @ np.asarray(query, dtype=np.float64)
    idx = int(np.argmax(sims))
    return idx, bank.slots[other_cluster, idx].copy()


def hard_keys(query, bank: InstanceBank, own_cluster: int):
    """One key per cluster: the hard positive for ``own_cluster``, the hard
    negative for every other cluster. Returns (slot indices, C x D keys)."""
    query = np.asarray(query, dtype=np.float64)
    sims = bank.slots @ query
    picks = np.argmax(sims, axis=1)
    picks[own_cluster] = np.argmin(sims[own_cluster])
    keys = bank.slots[np.arange(bank.num_clusters), picks]
    return picks, keys

"""Pseudo-label generation: pairwise distances, k-reciprocal neighbor
expansion, Jaccard distance and a deterministic DBSCAN on precomputed
distance matrices."""

from __future__ import annotations

from collections import deque

import numpy as np

from .core import OUTLIER, PseudoLabeling


def pairwise_euclidean(emb: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix between unit-norm rows.

    Uses ``sqrt(2 - 2 <x_i, x_j>)``, which is exact for unit vectors and
    yields an exactly symmetric, zero-diagonal matrix.
    """
    emb = np.asarray(emb, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1)
    if emb.shape[0] and not np.allclose(norms, 1.0, atol=1e-4):
        raise ValueError("pairwise_euclidean expects unit-norm rows")
    gram = emb @ emb.T
    sq = np.clip(2.0 - 2.0 * gram, 0.0, None)
    dist = np.sqrt(sq)
    np.fill_diagonal(dist, 0.0)
    return dist


def k_reciprocal_neighbors(dist: np.ndarray, k: int) -> np.ndarray:
    """Boolean matrix of k-reciprocal neighbor sets.

    Row i marks ``R(i) = {j : j in kNN(i) and i in kNN(j)}`` with kNN
    excluding the sample itself and ties broken by lower index. The
    diagonal is False.
    """
    dist = np.asarray(dist)
    n = dist.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < n; got k={k}, n={n}")
    # Stable argsort keeps equal distances in ascending index order.
    order = np.argsort(dist, axis=1, kind="stable")
    knn = np.zeros((n, n), dtype=bool)
    rows = np.arange(n)
    taken = np.zeros(n, dtype=np.int64)
    for col in range(min(k + 1, n)):
        j = order[:, col]
        pick = (j != rows) & (taken < k)
        knn[rows[pick], j[pick]] = True
        taken += pick
    return knn & knn.T


def jaccard_distance(neighbor_sets: np.ndarray) -> np.ndarray:
    """Jaccard distance matrix over neighbor sets.

    ``neighbor_sets`` is a boolean matrix whose row i is the set R(i);
    each set is treated as containing its own sample i regardless of the
    stored diagonal. Entry (i, j) is ``1 - |R(i) & R(j)| / |R(i) | R(j)|``.
    """
    sets = np.asarray(neighbor_sets, dtype=bool).copy()
    n = sets.shape[0]
    np.fill_diagonal(sets, True)
    # float32 matmul of 0/1 rows counts intersections exactly (n < 2^24).
    m = sets.astype(np.float32)
    inter = m @ m.T
    sizes = m.sum(axis=1)
    union = sizes[:, None] + sizes[None, :] - inter
    dist = 1.0 - inter.astype(np.float64) / union.astype(np.float64)
    np.fill_diagonal(dist, 0.0)
    return np.clip(dist, 0.0, 1.0)


def blend_distances(jaccard: np.ndarray, euclidean: np.ndarray, blend: float):
    """Convex blend ``(1-blend) * jaccard + blend * euclidean``."""
    if not 0.0 <= blend <= 1.0:
        raise ValueError(f"blend must be in [0, 1], got {blend}")
    if blend == 0.0:
        return jaccard
    return (1.0 - blend) * jaccard + blend * euclidean


def dbscan(dist: np.ndarray, eps: float, min_pts: int) -> PseudoLabeling:
    """DBSCAN on a precomputed distance matrix.

    A point is core iff it has at least ``min_pts`` neighbors within
    ``eps``, itself excluded. Expansion scans samples in ascending index
    order and claims border points for the first cluster that reaches
    them, so the result is deterministic.
    """
    dist = np.asarray(dist)
    n = dist.shape[0]
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    if min_pts < 1:
        raise ValueError(f"min_pts must be >= 1, got {min_pts}")

    within = dist <= eps
    np.fill_diagonal(within, False)
    neighbor_counts = within.sum(axis=1)
    core = neighbor_counts >= min_pts

    assignment = np.full(n, OUTLIER, dtype=np.int64)
    assigned = np.zeros(n, dtype=bool)
    cluster = 0
    for start in range(n):
        if assigned[start] or not core[start]:
            continue
        assigned[start] = True
        assignment[start] = cluster
        queue = deque([start])
        while queue:
            p = queue.popleft()
            for q in np.flatnonzero(within[p]):
                if assigned[q]:
                    continue
                assigned[q] = True
                assignment[q] = cluster
                if core[q]:
                    queue.append(q)
        cluster += 1
    labeling = PseudoLabeling(assignment=assignment, num_clusters=cluster)
    labeling.validate()
    return labeling


def pseudo_label(emb, k, eps, min_pts, blend=0.0) -> PseudoLabeling:
    """Full per-epoch labeling: Euclidean -> k-reciprocal -> Jaccard -> DBSCAN."""
    euclid = pairwise_euclidean(emb)
    recip = k_reciprocal_neighbors(euclid, k)
    jac = jaccard_distance(recip)
    return dbscan(blend_distances(jac, euclid, blend), eps, min_pts)

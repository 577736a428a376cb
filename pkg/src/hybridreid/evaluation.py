"""Retrieval evaluation: Euclidean ranking, mean average precision and
CMC Rank-k under the single-query protocol with same-id/same-camera junk
filtering. No re-ranking or other post-processing is applied."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .core import EvaluationError

DEFAULT_RANKS = (1, 5, 10)


@dataclass
class RetrievalResult:
    """Per-query rankings and APs plus aggregate metrics."""

    rankings: np.ndarray
    average_precisions: np.ndarray  # NaN for queries without a relevant match
    cmc: dict  # rank k -> accuracy over valid queries
    map: float

    def metrics(self) -> dict:
        out = {"mAP": self.map}
        for k, acc in self.cmc.items():
            out[f"rank{k}"] = acc
        return out


def rank_gallery(query_emb, gallery_emb) -> np.ndarray:
    """Gallery indices sorted by ascending Euclidean distance per query.

    Ties are broken by lower gallery index.
    """
    q = np.atleast_2d(np.asarray(query_emb, dtype=np.float64))
    g = np.atleast_2d(np.asarray(gallery_emb, dtype=np.float64))
    if g.shape[0] == 0:
        raise ValueError("gallery is empty")
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"query dim {q.shape[1]} != gallery dim {g.shape[1]}")
    dist = cdist(q, g)
    return np.argsort(dist, axis=1, kind="stable")


def _relevance(ranking, q_id, q_cam, g_ids, g_cams, junk_filter):
    """Ordered relevance flags after junk removal for one query."""
    ranked_ids = g_ids[ranking]
    ranked_cams = g_cams[ranking]
    if junk_filter:
        keep = ~((ranked_ids == q_id) & (ranked_cams == q_cam))
    else:
        keep = np.ones(ranking.shape[0], dtype=bool)
    return (ranked_ids[keep] == q_id)


def average_precision(relevant: np.ndarray):
    """Discrete AP over an ordered 0/1 relevance vector; None if no relevant."""
    total = int(relevant.sum())
    if total == 0:
        return None
    hits = np.cumsum(relevant)
    precisions = hits[relevant] / (np.flatnonzero(relevant) + 1.0)
    return float(precisions.sum() / total)


def mean_average_precision(
    rankings, q_ids, q_cams, g_ids, g_cams, junk_filter=True
) -> float:
    """mAP over queries that keep at least one relevant gallery item."""
    q_ids = np.asarray(q_ids)
    q_cams = np.asarray(q_cams)
    g_ids = np.asarray(g_ids)
    g_cams = np.asarray(g_cams)
    aps = []
    for qi, ranking in enumerate(rankings):
        rel = _relevance(ranking, q_ids[qi], q_cams[qi], g_ids, g_cams, junk_filter)
        ap = average_precision(rel)
        if ap is not None:
            aps.append(ap)
    if not aps:
        raise EvaluationError("no query has a relevant gallery item after filtering")
    return float(np.mean(aps))


def cmc_curve(rankings, q_ids, q_cams, g_ids, g_cams, ks=DEFAULT_RANKS,
              junk_filter=True) -> dict:
    """Rank-k accuracies: the fraction of valid queries whose first relevant
    match appears within the top k after junk filtering."""
    q_ids = np.asarray(q_ids)
    q_cams = np.asarray(q_cams)
    g_ids = np.asarray(g_ids)
    g_cams = np.asarray(g_cams)
    first_hits = []
    for qi, ranking in enumerate(rankings):
        rel = _relevance(ranking, q_ids[qi], q_cams[qi], g_ids, g_cams, junk_filter)
        hits = np.flatnonzero(rel)
        if hits.size:
            first_hits.append(hits[0] + 1)  # 1-based rank
    if not first_hits:
        raise EvaluationError("no query has a relevant gallery item after filtering")
    first_hits = np.asarray(first_hits)
    return {int(k): float(np.mean(first_hits <= k)) for k in ks}


def evaluate_retrieval(
    query_emb, gallery_emb, q_ids, q_cams, g_ids, g_cams,
    ks=DEFAULT_RANKS, junk_filter=True,
) -> RetrievalResult:
    """Rank the gallery for every query and aggregate mAP and CMC."""
    rankings = rank_gallery(query_emb, gallery_emb)
    q_ids = np.asarray(q_ids)
    q_cams = np.asarray(q_cams)
    g_ids = np.asarray(g_ids)
    g_cams = np.asarray(g_cams)
    aps = np.full(rankings.shape[0], np.nan)
    for qi in range(rankings.shape[0]):
        rel = _relevance(
            rankings[qi], q_ids[qi], q_cams[qi], g_ids, g_cams, junk_filter
        )
        ap = average_precision(rel)
        if ap is not None:
            aps[qi] = ap
    if np.all(np.isnan(aps)):
        raise EvaluationError("no query has a relevant gallery item after filtering")
    cmc = cmc_curve(rankings, q_ids, q_cams, g_ids, g_cams, ks, junk_filter)
    return RetrievalResult(
        rankings=rankings,
        average_precisions=aps,
        cmc=cmc,
        map=float(np.nanmean(aps)),
    )

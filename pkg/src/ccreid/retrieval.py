"""Cross-modality retrieval scoring, CMC/mAP metrics, and cost accounting.

Two scoring modes share one embedding pass.  Simplified mode ranks by
cosine similarity of pooled global features (higher is better); full
mode ranks by pairwise difference scores (lower is better).  Ranking
direction travels with the matrix as an explicit polarity tag, and ties
always break toward the lower gallery index so metrics are bit
reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .contrast import score_pairs_batch
from .model import ReidModel, embed_samples
from .nn import global_avg_pool_batch

SIMILARITY = "similarity"     # higher value = better match
DIFFERENCE = "difference"     # lower value = better match

FULL_MODE_CHUNK = 512


@dataclass
class ScoreMatrix:
    values: np.ndarray  # (P, G)
    polarity: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"score matrix must be 2-d, got shape {self.values.shape}")
        if self.polarity not in (SIMILARITY, DIFFERENCE):
            raise ValueError(f"unknown polarity '{self.polarity}'")
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError("score matrix contains non-finite entries")


@dataclass
class RetrievalResult:
    cmc: np.ndarray
    map: float
    backbone_evals: int
    ccn_evals: int
    scores: ScoreMatrix


def score_simplified(query_feats: np.ndarray, gallery_feats: np.ndarray) -> ScoreMatrix:
    """Cosine similarity between every query/gallery global feature pair."""
    q = np.asarray(query_feats, dtype=np.float64)
    g = np.asarray(gallery_feats, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"feature shapes disagree: {q.shape} vs {g.shape}")
    for name, arr in (("query", q), ("gallery", g)):
        norms = np.linalg.norm(arr, axis=1)
        if np.any(norms == 0):
            k = int(np.argmax(norms == 0))
            raise ValueError(f"zero-norm {name} feature at index {k}")
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    gn = g / np.linalg.norm(g, axis=1, keepdims=True)
    return ScoreMatrix(qn @ gn.T, SIMILARITY)


def score_full(query_maps, gallery_maps, model: ReidModel,
               chunk: int = FULL_MODE_CHUNK) -> ScoreMatrix:
    """Pairwise difference scores for every query/gallery combination.

    `query_maps`/`gallery_maps` are the (B, c_F, h_F, w_F) embedding
    tensors of each side.  Pairs are scored in chunks to bound memory.
    """
    p = query_maps.shape[0]
    g = gallery_maps.shape[0]
    pair_q, pair_g = np.meshgrid(np.arange(p), np.arange(g), indexing="ij")
    pair_q = pair_q.reshape(-1)
    pair_g = pair_g.reshape(-1)
    out = np.empty(p * g, dtype=np.float64)
    for lo in range(0, p * g, chunk):
        hi = min(lo + chunk, p * g)
        scores = score_pairs_batch(query_maps, gallery_maps,
                                   pair_q[lo:hi], pair_g[lo:hi],
                                   model.sampling, model.diff_head)
        out[lo:hi] = scores.data
    return ScoreMatrix(out.reshape(p, g), DIFFERENCE)


def _ranked_matches(scores: ScoreMatrix, query_ids, gallery_ids) -> np.ndarray:
    """Boolean (P, G) matrix: matches[q, k] = rank-(k+1) item is relevant."""
    q_ids = np.asarray(query_ids)
    g_ids = np.asarray(gallery_ids)
    p, g = scores.values.shape
    if q_ids.shape != (p,) or g_ids.shape != (g,):
        raise ValueError(
            f"id lists ({q_ids.shape}, {g_ids.shape}) disagree with matrix {p}x{g}")
    missing = ~np.isin(q_ids, g_ids)
    if missing.any():
        k = int(np.argmax(missing))
        raise ValueError(
            f"query {k} (identity {q_ids[k]}) has no relevant gallery item")
    keys = -scores.values if scores.polarity == SIMILARITY else scores.values
    order = np.argsort(keys, axis=1, kind="stable")  # ties: ascending index
    return g_ids[order] == q_ids[:, None]


def cmc_curve(scores: ScoreMatrix, query_ids, gallery_ids) -> np.ndarray:
    """cmc[k-1] = fraction of queries whose first hit has rank <= k."""
    matches = _ranked_matches(scores, query_ids, gallery_ids)
    p, g = matches.shape
    first_hit = np.argmax(matches, axis=1)
    return np.cumsum(np.bincount(first_hit, minlength=g)) / p


def mean_ap(scores: ScoreMatrix, query_ids, gallery_ids) -> float:
    """Mean over queries of average precision at each relevant rank."""
    matches = _ranked_matches(scores, query_ids, gallery_ids)
    aps = []
    for row in matches:
        ranks = np.nonzero(row)[0] + 1
        precisions = np.arange(1, len(ranks) + 1) / ranks
        aps.append(precisions.mean())
    return float(np.mean(aps))


def evaluate(model: ReidModel, query_set, gallery_set, mode: str) -> RetrievalResult:
    """Embed once, score per mode, and report metrics plus exact costs."""
    if mode not in ("simplified", "full"):
        raise ValueError(f"unknown evaluation mode '{mode}'")
    if not query_set or not gallery_set:
        raise ValueError("evaluate: empty query or gallery set")
    q_mod = {s.modality for s in query_set}
    g_mod = {s.modality for s in gallery_set}
    if len(q_mod) != 1 or len(g_mod) != 1 or q_mod == g_mod:
        raise ValueError(
            f"evaluate: queries and gallery must each be one modality, and "
            f"different ones (got {sorted(q_mod)} vs {sorted(g_mod)})")
    q_maps = embed_samples(model, query_set)
    g_maps = embed_samples(model, gallery_set)
    p, g = q_maps.shape[0], g_maps.shape[0]
    if mode == "simplified":
        q_feats = global_avg_pool_batch(q_maps).data
        g_feats = global_avg_pool_batch(g_maps).data
        scores = score_simplified(q_feats, g_feats)
        ccn_evals = 0
    else:
        scores = score_full(q_maps, g_maps, model)
        ccn_evals = p * g
    query_ids = [s.identity for s in query_set]
    gallery_ids = [s.identity for s in gallery_set]
    return RetrievalResult(
        cmc=cmc_curve(scores, query_ids, gallery_ids),
        map=mean_ap(scores, query_ids, gallery_ids),
        backbone_evals=p + g,
        ccn_evals=ccn_evals,
        scores=scores,
    )

"""Rank-based retrieval metrics (R@k, mAP) for text-to-image retrieval."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KS = (1, 5, 10)


@dataclass
class RetrievalMetrics:
    R1: float
    R5: float
    R10: float
    mAP: float
    n_queries: int
    n_gallery: int
    per_view: dict = field(default_factory=dict)
    router_accuracy: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"R1": self.R1, "R5": self.R5, "R10": self.R10, "mAP": self.mAP}


def rank_metrics(sim: np.ndarray, query_ids: np.ndarray, gallery_ids: np.ndarray, ks=KS) -> dict:
    """R@k and mAP (percentages) for a (queries x gallery) similarity matrix.

    Gallery items are ranked by descending similarity with ties kept in
    gallery-index order. AP averages precision at every correct item, over
    all correct items. Queries with no correct item in the gallery are
    skipped.
    """
    sim = np.asarray(sim, dtype=np.float64)
    query_ids, gallery_ids = np.asarray(query_ids), np.asarray(gallery_ids)
    if sim.size == 0 or sim.shape != (len(query_ids), len(gallery_ids)):
        raise ValueError(f"similarity shape {sim.shape} does not match {len(query_ids)} queries x {len(gallery_ids)} gallery")
    order = np.argsort(-sim, axis=1, kind="stable")
    hits = gallery_ids[order] == query_ids[:, None]
    n_pos = hits.sum(axis=1)
    valid = n_pos > 0
    if not valid.any():
        raise ValueError("no query has a correct item in the gallery")
    hits, n_pos = hits[valid], n_pos[valid]
    out = {f"R{k}": 100.0 * float(hits[:, :k].any(axis=1).mean()) for k in ks}
    cum = np.cumsum(hits, axis=1)
    ranks = np.arange(1, hits.shape[1] + 1)
    ap = (hits * cum / ranks).sum(axis=1) / n_pos
    out["mAP"] = 100.0 * float(ap.mean())
    out["n_queries"] = int(valid.sum())
    return out

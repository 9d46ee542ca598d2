"""Cluster quality against ground truth and cross-camera retrieval metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import OUTLIER


@dataclass(frozen=True)
class ClusterQuality:
    """Pairwise precision/recall/f-score plus identity expansion.

    Pair counts run over non-outlier samples only. Expansion averages, per
    identity, the number of distinct clusters its samples land in, counting
    each outlier sample as one extra cluster. None marks undefined values.
    """

    pair_precision: float | None
    pair_recall: float | None
    f_score: float | None
    expansion: float | None

    def as_dict(self) -> dict:
        return {
            "pair_precision": self.pair_precision,
            "pair_recall": self.pair_recall,
            "f_score": self.f_score,
            "expansion": self.expansion,
        }


def cluster_quality(labels, gt_ids) -> ClusterQuality:
    """Score a label vector against ground-truth identities.

    Needs a ground-truth id for every sample. Precision is None when no
    same-cluster pair exists, recall is None when no same-identity pair
    exists among non-outlier samples.
    """
    labels = np.asarray(labels, dtype=np.int64)
    gt = np.asarray(gt_ids, dtype=np.int64)
    if labels.shape != gt.shape or labels.ndim != 1:
        raise ValueError("labels and gt_ids must be 1-d vectors of equal length")
    if labels.size == 0:
        raise ValueError("cannot score an empty assignment")

    kept = labels != OUTLIER
    klabels, kgt = labels[kept], gt[kept]

    def same_pairs(values):
        _, counts = np.unique(values, return_counts=True)
        return int(np.sum(counts * (counts - 1) // 2))

    cluster_pairs = same_pairs(klabels)
    id_pairs = same_pairs(kgt)
    both = 0
    if klabels.size:
        _, counts = np.unique(np.stack([klabels, kgt], axis=1), axis=0, return_counts=True)
        both = int(np.sum(counts * (counts - 1) // 2))
    precision = both / cluster_pairs if cluster_pairs > 0 else None
    recall = both / id_pairs if id_pairs > 0 else None
    if precision is None or recall is None:
        f_score = None
    else:
        f_score = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0

    counts = []
    for gid in np.unique(gt):
        mask = gt == gid
        distinct = len(np.unique(labels[mask & kept]))
        distinct += int(np.sum(~kept[mask]))  # each outlier sample counts alone
        counts.append(distinct)
    expansion = float(np.mean(counts)) if counts else None
    return ClusterQuality(precision, recall, f_score, expansion)


@dataclass(frozen=True, eq=False)
class RetrievalResult:
    """Mean average precision and CMC over answerable queries."""

    mean_ap: float
    cmc: np.ndarray  # cmc[k-1] = fraction with a correct match in top k
    n_queries: int
    n_skipped: int  # queries with no valid cross-camera match

    def rank(self, k: int) -> float:
        if not (1 <= k <= len(self.cmc)):
            raise ValueError(f"rank must lie in [1, {len(self.cmc)}]")
        return float(self.cmc[k - 1])

    def as_dict(self) -> dict:
        return {
            "mean_ap": self.mean_ap,
            "cmc": [float(v) for v in self.cmc],
            "n_queries": self.n_queries,
            "n_skipped": self.n_skipped,
        }


def retrieval_metrics(
    query_feats,
    query_ids,
    query_cams,
    gallery_feats,
    gallery_ids,
    gallery_cams,
    max_rank: int = 10,
) -> RetrievalResult:
    """Rank gallery rows per query by Euclidean distance and score AP / CMC.

    Gallery entries sharing both identity and camera with the query are
    excluded from that query's ranking. Queries left without any relevant
    gallery entry are skipped (counted in n_skipped).
    """
    q = np.asarray(query_feats, dtype=np.float64)
    g = np.asarray(gallery_feats, dtype=np.float64)
    query_ids = np.asarray(query_ids, dtype=np.int64)
    query_cams = np.asarray(query_cams, dtype=np.int64)
    gallery_ids = np.asarray(gallery_ids, dtype=np.int64)
    gallery_cams = np.asarray(gallery_cams, dtype=np.int64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError("query and gallery features must be 2-d with equal dim")
    if len(query_ids) != len(q) or len(gallery_ids) != len(g):
        raise ValueError("metadata length mismatch")
    if len(g) == 0 or len(q) == 0:
        raise ValueError("query and gallery must be non-empty")
    if max_rank < 1:
        raise ValueError("max_rank must be >= 1")

    aps = []
    hits = np.zeros(max_rank)
    answered = 0
    skipped = 0
    for qi in range(len(q)):
        diff = g - q[qi]
        dist = np.einsum("ij,ij->i", diff, diff)
        keep = ~((gallery_ids == query_ids[qi]) & (gallery_cams == query_cams[qi]))
        idx = np.flatnonzero(keep)
        if idx.size == 0:
            skipped += 1
            continue
        order = idx[np.argsort(dist[idx], kind="stable")]
        relevant = gallery_ids[order] == query_ids[qi]
        n_rel = int(relevant.sum())
        if n_rel == 0:
            skipped += 1
            continue
        answered += 1
        ranks = np.flatnonzero(relevant)  # 0-based positions of matches
        precision_at = np.arange(1, n_rel + 1) / (ranks + 1.0)
        aps.append(float(precision_at.mean()))
        first = int(ranks[0])
        if first < max_rank:
            hits[first:] += 1.0

    if answered == 0:
        raise ValueError("no query has a valid cross-camera match")
    cmc = hits / answered
    return RetrievalResult(float(np.mean(aps)), cmc, answered, skipped)


def retrieval_eval(encoder, dataset, query_idx, gallery_idx, max_rank: int = 10) -> RetrievalResult:
    """Encode a dataset with the model and score the given split."""
    query_idx = np.asarray(query_idx, dtype=np.int64)
    gallery_idx = np.asarray(gallery_idx, dtype=np.int64)
    if np.intersect1d(query_idx, gallery_idx).size:
        raise ValueError("query and gallery must be disjoint")
    if not dataset.has_ground_truth:
        raise ValueError("retrieval evaluation needs ground-truth ids")
    emb, _ = encoder.encode(dataset.features)
    gt = dataset.gt_ids
    cams = dataset.camera_ids
    return retrieval_metrics(
        emb[query_idx],
        gt[query_idx],
        cams[query_idx],
        emb[gallery_idx],
        gt[gallery_idx],
        cams[gallery_idx],
        max_rank=max_rank,
    )

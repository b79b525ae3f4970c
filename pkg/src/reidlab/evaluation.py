"""Single-query retrieval evaluation: ranking, CMC, and mAP.

Similarity is cosine over L2-normalized embeddings.  The standard protocol
applies: gallery images sharing both identity and camera with the query are
excluded, relevance means same identity under a different camera, queries
with no relevant gallery image are skipped (but counted).  Ranking ties are
broken by gallery index ascending so reports are deterministic.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

_NORM_FLOOR = 1e-12


@dataclass
class RankedResult:
    query_index: int
    order: np.ndarray  # eligible gallery indices, best first
    relevant: np.ndarray  # bool flags aligned with order


@dataclass
class EvalReport:
    cmc: np.ndarray  # rank-k accuracy, k = 1..K_max
    map: float
    num_queries: int  # queries contributing to the numbers
    num_skipped: int  # queries with no eligible relevant image
    random_rank1: float  # analytic chance level for this gallery composition

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])


def normalize_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    n = np.linalg.norm(m, axis=-1, keepdims=True)
    return m / np.maximum(n, _NORM_FLOOR)


def cosine_similarities(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    if queries.shape[-1] != gallery.shape[-1]:
        raise ShapeError(
            f"embedding dims differ: {queries.shape[-1]} vs {gallery.shape[-1]}"
        )
    return normalize_rows(queries) @ normalize_rows(gallery).T


def rank_gallery(sims: np.ndarray, eligible: np.ndarray) -> np.ndarray:
    """Order ``eligible`` gallery indices by descending similarity.

    Equal similarities fall back to gallery index ascending — lexsort's last
    key is the primary one.
    """
    eligible = np.asarray(eligible)
    return eligible[np.lexsort((eligible, -sims[eligible]))]


def evaluate(
    query_embeds: np.ndarray,
    query_ids: np.ndarray,
    query_cams: np.ndarray,
    gallery_embeds: np.ndarray,
    gallery_ids: np.ndarray,
    gallery_cams: np.ndarray,
    k_max: int = 20,
) -> tuple[EvalReport, list[RankedResult]]:
    """Rank every query against the gallery and score CMC/mAP."""
    sims = cosine_similarities(query_embeds, gallery_embeds)
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)
    results = []
    skipped = 0
    for qi in range(len(query_embeds)):
        same_id = gallery_ids == query_ids[qi]
        eligible = ~(same_id & (gallery_cams == query_cams[qi]))
        relevant_mask = same_id & eligible
        if not eligible.any() or not relevant_mask.any():
            skipped += 1
            continue
        order = rank_gallery(sims[qi], np.flatnonzero(eligible))
        results.append(RankedResult(qi, order, relevant_mask[order]))
    report = EvalReport(
        cmc=cmc_curve(results, k_max),
        map=mean_ap(results),
        num_queries=len(results),
        num_skipped=skipped,
        random_rank1=random_rank1(results),
    )
    return report, results


def cmc_curve(results: list[RankedResult], k_max: int) -> np.ndarray:
    """cmc[k-1] = fraction of queries with a relevant item in the top k."""
    if not results:
        return np.zeros(k_max)
    hits = np.zeros(k_max)
    for r in results:
        first = int(np.flatnonzero(r.relevant)[0])
        if first < k_max:
            hits[first:] += 1.0
    return hits / len(results)


def average_precision(relevant: np.ndarray) -> float:
    """Mean of precision-at-rank over the relevant positions."""
    ranks = np.flatnonzero(relevant) + 1  # 1-indexed
    if len(ranks) == 0:
        return 0.0
    found = np.arange(1, len(ranks) + 1)
    return float(np.mean(found / ranks))


def mean_ap(results: list[RankedResult]) -> float:
    if not results:
        return 0.0
    return float(np.mean([average_precision(r.relevant) for r in results]))


def random_rank1(results: list[RankedResult]) -> float:
    """Expected rank-1 accuracy of a uniformly random ranking.

    For one query the top item of a random permutation is relevant with
    probability R/G; the baseline is the mean of that over queries.
    """
    if not results:
        return 0.0
    return float(np.mean([r.relevant.sum() / len(r.order) for r in results]))


def rerank_top(
    results: list[RankedResult],
    pair_score,
    top_r: int = 20,
) -> list[RankedResult]:
    """Re-order each query's top ``top_r`` entries by a pairwise score.

    ``pair_score(query_index, gallery_index) -> float`` is typically the
    aligned-feature similarity from the cross-image path; higher is better.
    Ties keep gallery index ascending, entries past top_r keep their rank.
    """
    out = []
    for r in results:
        k = min(top_r, len(r.order))
        head = r.order[:k]
        scores = np.array([pair_score(r.query_index, int(g)) for g in head])
        perm = np.concatenate([np.lexsort((head, -scores)), np.arange(k, len(r.order))])
        out.append(RankedResult(r.query_index, r.order[perm], r.relevant[perm]))
    return out


def report_from_results(results: list[RankedResult], num_skipped: int, k_max: int = 20) -> EvalReport:
    return EvalReport(
        cmc=cmc_curve(results, k_max),
        map=mean_ap(results),
        num_queries=len(results),
        num_skipped=num_skipped,
        random_rank1=random_rank1(results),
    )


def write_report(report: EvalReport, out_dir: str, results: list[RankedResult] | None = None) -> None:
    """CSV + human-readable text; optionally the per-query ranked lists."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "eval_report.csv"), "w") as fh:
        fh.write("metric,value\n")
        fh.write(f"mAP,{report.map:.6f}\n")
        fh.write(f"num_queries,{report.num_queries}\n")
        fh.write(f"num_skipped,{report.num_skipped}\n")
        fh.write(f"random_rank1,{report.random_rank1:.6f}\n")
        for k, v in enumerate(report.cmc, start=1):
            fh.write(f"rank{k},{v:.6f}\n")
    with open(os.path.join(out_dir, "eval_report.txt"), "w") as fh:
        fh.write(
            f"queries evaluated: {report.num_queries} (skipped {report.num_skipped})\n"
            f"mAP:    {report.map:.4f}\n"
            f"rank-1: {report.rank1:.4f} (chance {report.random_rank1:.4f})\n"
        )
        shown = min(len(report.cmc), 10)
        fh.write("CMC:    " + "  ".join(f"r{k}={report.cmc[k - 1]:.3f}" for k in range(1, shown + 1)) + "\n")
    if results is not None:
        with open(os.path.join(out_dir, "ranked_lists.csv"), "w") as fh:
            fh.write("query_index,rank,gallery_index,relevant\n")
            for r in results:
                for rank, (g, rel) in enumerate(zip(r.order, r.relevant), start=1):
                    fh.write(f"{r.query_index},{rank},{g},{int(rel)}\n")

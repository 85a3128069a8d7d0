"""Retrieval metrics: gallery ranking, Rank-k / CMC, average precision and mAP."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import EvaluationError, ShapeError
from .featureset import SampleRecord
from .parallel import ordered_map

AP_MODES = ("standard", "paper_literal")
_CHUNK = 64


@dataclass
class RankingResult:
    query_id: int
    order: np.ndarray  # gallery indices, most similar first
    relevant: np.ndarray  # bool per ranked position

    @property
    def first_hit(self) -> int | None:
        """1-based rank of the first relevant entry."""
        hits = np.flatnonzero(self.relevant)
        return int(hits[0]) + 1 if len(hits) else None


@dataclass
class EvalReport:
    map_standard: float
    map_paper: float
    rank_at: dict[int, float]
    cmc: np.ndarray
    per_query: list[dict] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "map_standard": self.map_standard,
            "map_paper": self.map_paper,
            "rank1": self.rank_at[1],
            "rank5": self.rank_at[5],
            "rank10": self.rank_at[10],
            "cmc": [float(x) for x in self.cmc],
        }


def _rank_one(qf, qid, qcam, gf, gid, gcam, filter_same_camera, query_id=0) -> RankingResult:
    eligible = np.arange(len(gf))
    if filter_same_camera:
        eligible = eligible[~((gid == qid) & (gcam == qcam))]
    if len(eligible) == 0:
        raise EvaluationError(f"query {query_id}: no eligible gallery entries")
    diff = gf[eligible] - qf
    dist = np.sqrt((diff * diff).sum(axis=1))
    order = eligible[np.argsort(dist, kind="stable")]
    return RankingResult(query_id, order, gid[order] == qid)


def rank_gallery(query: SampleRecord, gallery: Sequence[SampleRecord], filter_same_camera: bool = False) -> RankingResult:
    """Gallery sorted by ascending L2 distance to the query; ties keep gallery order.

    With ``filter_same_camera`` entries sharing the query's identity and camera
    are dropped first.
    """
    gf = np.stack([np.asarray(g.feature, dtype=np.float64).ravel() for g in gallery]) if gallery else np.zeros((0, 0))
    qf = np.asarray(query.feature, dtype=np.float64).ravel()
    if len(gallery) and gf.shape[1] != qf.shape[0]:
        raise ShapeError("query and gallery features differ in shape")
    gid = np.array([-1 if g.identity is None else g.identity for g in gallery], dtype=np.int64)
    gcam = np.array([-1 if g.camera is None else g.camera for g in gallery], dtype=np.int64)
    if filter_same_camera and (query.camera is None or np.any(gcam < 0)):
        raise EvaluationError("camera filtering needs camera ids on query and gallery")
    qid = -1 if query.identity is None else query.identity
    qcam = -1 if query.camera is None else query.camera
    return _rank_one(qf, qid, qcam, gf, gid, gcam, filter_same_camera, query.id)


def rank_all(query_feats, query_ids, query_cams, gallery_feats, gallery_ids, gallery_cams,
             filter_same_camera: bool = False) -> list[RankingResult]:
    qf = np.asarray(query_feats, dtype=np.float64)
    gf = np.asarray(gallery_feats, dtype=np.float64)
    if qf.ndim != 2 or gf.ndim != 2 or qf.shape[1] != gf.shape[1]:
        raise ShapeError(f"query {qf.shape} and gallery {gf.shape} features do not match")
    qid = np.asarray(query_ids, dtype=np.int64)
    qcam = np.asarray(query_cams, dtype=np.int64)
    gid = np.asarray(gallery_ids, dtype=np.int64)
    gcam = np.asarray(gallery_cams, dtype=np.int64)

    def chunk(start):
        return [
            _rank_one(qf[i], qid[i], qcam[i], gf, gid, gcam, filter_same_camera, i)
            for i in range(start, min(start + _CHUNK, len(qf)))
        ]

    return [r for part in ordered_map(chunk, range(0, len(qf), _CHUNK)) for r in part]


def rank_k_accuracy(rankings: Sequence[RankingResult], k: int) -> float:
    """Fraction of queries with a relevant entry in their top ``k``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not rankings:
        return 0.0
    return float(np.mean([bool(r.relevant[:k].any()) for r in rankings]))


def average_precision(r: RankingResult, mode: str = "standard") -> float:
    """Sum of precision at each relevant position, over the relevant count.

    ``paper_literal`` divides by the ranked gallery size instead. The sum is
    accumulated exactly, so the result is the correctly rounded value.
    """
    if mode not in AP_MODES:
        raise ValueError(f"mode must be one of {AP_MODES}")
    rel = np.asarray(r.relevant, dtype=bool)
    n_rel = int(rel.sum())
    if n_rel == 0:
        raise EvaluationError(f"query {r.query_id} has no relevant gallery entry")
    # exact rational sum over the relevant positions, rounded once at the end
    positions = np.flatnonzero(rel) + 1
    total = sum(Fraction(k, int(pos)) for k, pos in enumerate(positions, start=1))
    return float(total / (n_rel if mode == "standard" else len(rel)))


def mean_ap(rankings: Sequence[RankingResult], mode: str = "standard") -> float:
    if not rankings:
        raise EvaluationError("no rankings to average")
    return float(np.mean([average_precision(r, mode) for r in rankings]))


def cmc_curve(rankings: Sequence[RankingResult]) -> np.ndarray:
    """Rank-k accuracy for k = 1 .. longest ranking."""
    if not rankings:
        return np.zeros(0)
    depth = max(len(r.relevant) for r in rankings)
    curve = np.zeros(depth)
    for r in rankings:
        first = r.first_hit
        if first is not None:
            curve[first - 1 :] += 1
    return curve / len(rankings)


def report(rankings: Sequence[RankingResult]) -> EvalReport:
    cmc = cmc_curve(rankings)
    per_query = [
        {
            "query": r.query_id,
            "first_hit": r.first_hit,
            "ap_standard": average_precision(r, "standard"),
            "ap_paper": average_precision(r, "paper_literal"),
        }
        for r in rankings
    ]
    return EvalReport(
        map_standard=float(np.mean([q["ap_standard"] for q in per_query])),
        map_paper=float(np.mean([q["ap_paper"] for q in per_query])),
        rank_at={k: rank_k_accuracy(rankings, k) for k in (1, 5, 10)},
        cmc=cmc,
        per_query=per_query,
    )


def evaluate(query_feats, query_ids, query_cams, gallery_feats, gallery_ids, gallery_cams,
             filter_same_camera: bool = False) -> EvalReport:
    return report(rank_all(query_feats, query_ids, query_cams, gallery_feats, gallery_ids,
                           gallery_cams, filter_same_camera))

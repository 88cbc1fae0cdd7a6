"""Rank-k, mAP and mINP for text -> image retrieval."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import NoQueries, QueryWithoutRelevant

CSV_FIELDS = ("run_id", "noise_rate", "epoch", "r1", "r5", "r10", "mAP", "mINP")


@dataclass
class RankingResult:
    order: np.ndarray  # Q x G gallery indices, best first
    relevant: np.ndarray  # Q x G bool, aligned with ``order``

    @property
    def n_queries(self) -> int:
        return self.order.shape[0]


@dataclass
class EvalReport:
    rank1: float
    rank5: float
    rank10: float
    mAP: float
    mINP: float
    n_queries: int

    def csv_row(self, run_id: str, noise_rate: float, epoch: int) -> dict:
        return {
            "run_id": run_id,
            "noise_rate": f"{noise_rate:g}",
            "epoch": epoch,
            "r1": f"{self.rank1:.4f}",
            "r5": f"{self.rank5:.4f}",
            "r10": f"{self.rank10:.4f}",
            "mAP": f"{self.mAP:.4f}",
            "mINP": f"{self.mINP:.4f}",
        }

    def to_csv(self, run_id: str, noise_rate: float, epoch: int) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerow(self.csv_row(run_id, noise_rate, epoch))
        return buf.getvalue()

    def as_dict(self) -> dict:
        return asdict(self)


def rank_gallery(sim, query_ids, gallery_ids) -> RankingResult:
    """Sort each query's gallery by descending similarity, ties by index."""
    sim = np.asarray(sim, dtype=np.float64)
    order = np.argsort(-sim, axis=1, kind="stable")
    relevant = np.asarray(gallery_ids)[order] == np.asarray(query_ids)[:, None]
    return RankingResult(order, relevant)


def _check(result: RankingResult, need_relevant: bool):
    if result.n_queries == 0:
        raise NoQueries("no queries to evaluate")
    if need_relevant and not np.all(result.relevant.any(axis=1)):
        raise QueryWithoutRelevant("a query has no relevant gallery item")


def rank_k(result: RankingResult, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    _check(result, False)
    return 100.0 * float(np.mean(result.relevant[:, :k].any(axis=1)))


def average_precision(relevant_row) -> float:
    rel = np.asarray(relevant_row, dtype=bool)
    hits = np.flatnonzero(rel) + 1
    if hits.size == 0:
        raise QueryWithoutRelevant("query has no relevant gallery item")
    return float(np.mean(np.arange(1, hits.size + 1) / hits))


def inverse_negative_penalty(relevant_row) -> float:
    rel = np.asarray(relevant_row, dtype=bool)
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        raise QueryWithoutRelevant("query has no relevant gallery item")
    return hits.size / float(hits[-1] + 1)


def mean_ap(result: RankingResult) -> float:
    _check(result, True)
    rel = result.relevant
    cum = np.cumsum(rel, axis=1)
    pos = np.arange(1, rel.shape[1] + 1)
    ap = np.sum(np.where(rel, cum / pos, 0.0), axis=1) / rel.sum(axis=1)
    return 100.0 * float(np.mean(ap))


def mean_inp(result: RankingResult) -> float:
    _check(result, True)
    rel = result.relevant
    G = rel.shape[1]
    last = G - np.argmax(rel[:, ::-1], axis=1)
    return 100.0 * float(np.mean(rel.sum(axis=1) / last))


def evaluate(sim, query_ids, gallery_ids) -> EvalReport:
    """Full report for a query x gallery similarity matrix."""
    res = rank_gallery(sim, query_ids, gallery_ids)
    return EvalReport(
        rank1=rank_k(res, 1),
        rank5=rank_k(res, 5),
        rank10=rank_k(res, 10),
        mAP=mean_ap(res),
        mINP=mean_inp(res),
        n_queries=res.n_queries,
    )

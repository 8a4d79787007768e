"""
Rank-based retrieval metrics: R@K, MedR, MeanR, mAP and RSum.

The gallery is sorted by score descending with ties broken by ascending item id.
A query's rank is the 1-based position of its best-ranked relevant item.
"""

from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from errors import ConfigError, EmptyEvaluationError, GroundTruthError
from joint_space import SimilarityMatrix

RECALL_KS = (1, 5, 10)


@dataclass
class GroundTruth:
    relevant: dict[int, set[int]]

    def positives(self, query_id: int) -> set[int]:
        found = self.relevant.get(query_id)
        if not found:
            raise GroundTruthError(f"query {query_id} has no relevant items")
        return found

    def validate(self, query_ids: Iterable[int], gallery_ids: Iterable[int]) -> None:
        gallery = set(gallery_ids)
        for q in query_ids:
            missing = self.positives(q) - gallery
            if missing:
                raise GroundTruthError(f"query {q}: relevant ids {sorted(missing)} not in gallery")


@dataclass
class RetrievalReport:
    direction: str
    r_at: dict[int, float]
    med_r: float
    mean_r: float
    map: float

    @property
    def rsum_contribution(self) -> float:
        """R@1 + R@5 + R@10 in percentage points."""
        return 100.0 * sum(self.r_at[k] for k in RECALL_KS)

    def records(self) -> list[str]:
        lines = [f"{self.direction} R@{k} {100.0 * self.r_at[k]!r}" for k in RECALL_KS]
        lines.append(f"{self.direction} MedR {self.med_r!r}")
        lines.append(f"{self.direction} MeanR {self.mean_r!r}")
        lines.append(f"{self.direction} mAP {self.map!r}")
        return lines


def rank_order(scores: np.ndarray, gallery_ids: Sequence[int]) -> np.ndarray:
    """Gallery indices by score descending, ties by ascending id."""
    return np.lexsort((np.asarray(gallery_ids), -np.asarray(scores, dtype=np.float64)))


def positive_ranks(scores: np.ndarray, positives: set[int], gallery_ids: Sequence[int]) -> np.ndarray:
    if not positives:
        raise GroundTruthError("empty positive set")
    ranked = np.asarray(gallery_ids)[rank_order(scores, gallery_ids)]
    ranks = np.flatnonzero(np.isin(ranked, list(positives))) + 1
    if ranks.size == 0:
        raise GroundTruthError(f"none of {sorted(positives)} is in the gallery")
    return ranks


def rank_of_best_positive(scores: np.ndarray, positives: set[int],
                          gallery_ids: Sequence[int] | None = None) -> int:
    ids = range(len(scores)) if gallery_ids is None else gallery_ids
    return int(positive_ranks(scores, positives, list(ids))[0])


def recall_at_k(ranks: Sequence[int], k: int) -> float:
    if k < 1:
        raise ConfigError(f"recall needs k >= 1, got {k}")
    if len(ranks) == 0:
        raise EmptyEvaluationError("no queries to evaluate")
    return float(np.mean(np.asarray(ranks) <= k))


def median_and_mean_rank(ranks: Sequence[int]) -> tuple[float, float]:
    if len(ranks) == 0:
        raise EmptyEvaluationError("no queries to evaluate")
    r = np.asarray(ranks, dtype=np.float64)
    return float(np.median(r)), float(np.mean(r))


def average_precision(ranks: Sequence[int]) -> float:
    """Non-interpolated AP from the 1-based ranks of every relevant item."""
    r = np.sort(np.asarray(ranks, dtype=np.float64))
    return float(np.mean(np.arange(1, r.size + 1) / r))


def mean_average_precision(scores: np.ndarray, gt: GroundTruth, query_ids: Sequence[int],
                           gallery_ids: Sequence[int]) -> float:
    if len(query_ids) == 0:
        raise EmptyEvaluationError("no queries to evaluate")
    aps = [average_precision(positive_ranks(scores[i], gt.positives(q), gallery_ids))
           for i, q in enumerate(query_ids)]
    return float(np.mean(aps))


def direction_report(S: SimilarityMatrix, gt: GroundTruth, direction: str) -> RetrievalReport:
    """Rows of S are the queries, columns the gallery."""
    if len(S.row_ids) == 0:
        raise EmptyEvaluationError(f"{direction}: no queries")
    gt.validate(S.row_ids, S.col_ids)
    best, aps = [], []
    for i, q in enumerate(S.row_ids):
        ranks = positive_ranks(S.scores[i], gt.positives(q), S.col_ids)
        best.append(int(ranks[0]))
        aps.append(average_precision(ranks))
    med_r, mean_r = median_and_mean_rank(best)
    return RetrievalReport(direction, {k: recall_at_k(best, k) for k in RECALL_KS},
                           med_r, mean_r, float(np.mean(aps)))


def full_report(S: SimilarityMatrix, t2v: GroundTruth,
                v2t: GroundTruth) -> tuple[RetrievalReport, RetrievalReport, float]:
    """S has videos as rows and captions as columns; text-to-video reads its transpose."""
    t2v_report = direction_report(S.transpose(), t2v, "t2v")
    v2t_report = direction_report(S, v2t, "v2t")
    recalls = [t2v_report.r_at[k] for k in RECALL_KS] + [v2t_report.r_at[k] for k in RECALL_KS]
    return t2v_report, v2t_report, 100.0 * sum(recalls)


def rsum_from_recalls(recalls: Iterable[float]) -> float:
    """RSum from six recall percentages, rounded to the one decimal tables report."""
    return round(sum(recalls), 1)


# ============================================================
# Rendering
# ============================================================

def format_rank(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else f"{value:.1f}"


_COLUMNS = ("R@1", "R@5", "R@10", "MedR", "MeanR", "mAP")


def _cells(report: RetrievalReport) -> list[str]:
    return [f"{100 * report.r_at[1]:.1f}", f"{100 * report.r_at[5]:.1f}", f"{100 * report.r_at[10]:.1f}",
            format_rank(report.med_r), f"{report.mean_r:.1f}", f"{report.map:.3f}"]


def render_table(t2v: RetrievalReport, v2t: RetrievalReport, rsum: float) -> str:
    header = [*(f"t2v {c}" for c in _COLUMNS), *(f"v2t {c}" for c in _COLUMNS), "RSum"]
    values = [*_cells(t2v), *_cells(v2t), f"{rsum:.1f}"]
    widths = [max(len(h), len(v)) for h, v in zip(header, values)]
    return "\n".join([
        "  ".join(h.rjust(w) for h, w in zip(header, widths)),
        "  ".join(v.rjust(w) for v, w in zip(values, widths)),
    ])


def render_records(t2v: RetrievalReport, v2t: RetrievalReport, rsum: float) -> str:
    return "\n".join([*t2v.records(), *v2t.records(), f"all RSum {rsum!r}"]) + "\n"

"""Retrieval metrics and plain-text reports.

Average precision of a ranking is the mean over relevant items of
(number of relevant items seen so far) / (rank), with ranks 1-based; mean
average precision averages over queries.  Precision-recall curves are
101-point interpolated: at each recall level on a 0.01 grid, the best
precision achieved at that recall or beyond, averaged over queries.

Report files use fixed 6-decimal formatting and sorted iteration orders so
equal results always produce identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RECALL_GRID = np.round(np.linspace(0.0, 1.0, 101), 2)


def rank_candidates(scores: dict[str, float]) -> list[str]:
    """Candidates by descending score; ties break toward the smaller id."""
    return [cid for cid, _ in sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))]


def average_precision(ranking: list[str], relevant: set[str]) -> float:
    if not relevant:
        raise ValueError("average precision needs at least one relevant id")
    if len(set(ranking)) != len(ranking):
        raise ValueError("ranking contains duplicate ids")
    hits = 0
    total = 0.0
    for position, cid in enumerate(ranking, start=1):
        if cid in relevant:
            hits += 1
            total += hits / position
    if hits != len(relevant):
        missing = len(relevant) - hits
        raise ValueError(f"ranking is missing {missing} relevant id(s)")
    return total / len(relevant)


def complete_ranking(scores: dict[str, float], relevant: set[str]) -> list[str]:
    """Ranking over scored candidates, with unscored relevant ids appended.

    A method that fails to score a true duplicate still pays for it: the
    missing ids go to the very bottom, in id order.
    """
    ranking = rank_candidates(scores)
    ranked_set = set(ranking)
    ranking.extend(sorted(r for r in relevant if r not in ranked_set))
    return ranking


def mean_average_precision(aps: list[float]) -> float:
    if not aps:
        raise ValueError("no queries to average")
    return float(np.mean(aps))


def pr_curve(rankings: list[tuple[list[str], set[str]]]) -> np.ndarray:
    """(101, 2) interpolated recall/precision points averaged over queries."""
    if not rankings:
        raise ValueError("no rankings given")
    curves = np.zeros((len(rankings), RECALL_GRID.size))
    for row, (ranking, relevant) in enumerate(rankings):
        hits = np.cumsum([1 if cid in relevant else 0 for cid in ranking])
        positions = np.arange(1, len(ranking) + 1)
        precision = hits / positions
        recall = hits / len(relevant)
        # Best precision at recall >= r, scanned from the deep end.
        best_from = np.maximum.accumulate(precision[::-1])[::-1]
        idx = np.searchsorted(recall, RECALL_GRID, side="left")
        curve = np.where(idx < len(ranking), best_from[np.minimum(idx, len(ranking) - 1)], 0.0)
        curves[row] = curve
    return np.column_stack([RECALL_GRID, curves.mean(axis=0)])


@dataclass
class EvalReport:
    method: str
    variant: str
    step_seconds: float
    model_id: str
    per_query: list[tuple[str, float, int]] = field(default_factory=list)  # (query, ap, n relevant)
    skipped: list[str] = field(default_factory=list)

    @property
    def mean_ap(self) -> float:
        return mean_average_precision([ap for _, ap, _ in self.per_query])


def format_report(report: EvalReport) -> str:
    lines = [
        f"method\t{report.method}",
        f"variant\t{report.variant}",
        f"step_seconds\t{report.step_seconds:.6f}",
        f"model\t{report.model_id}",
        f"queries\t{len(report.per_query)}",
        f"skipped\t{len(report.skipped)}",
        f"mAP\t{report.mean_ap:.6f}",
        "",
        "query\tn_relevant\tap",
    ]
    for query, ap, n_rel in sorted(report.per_query):
        lines.append(f"{query}\t{n_rel}\t{ap:.6f}")
    for query in sorted(report.skipped):
        lines.append(f"{query}\t0\tskipped")
    return "\n".join(lines) + "\n"


def format_pr_curve(points: np.ndarray) -> str:
    lines = ["recall\tprecision"]
    for recall, precision in points:
        lines.append(f"{recall:.2f}\t{precision:.6f}")
    return "\n".join(lines) + "\n"

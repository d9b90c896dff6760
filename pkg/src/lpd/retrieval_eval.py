"""Ranking, AP/mAP, precision@k and inter-space overlap diagnostics.

Average precision here is the exact full-judgment AP; the benchmark's
relevance sets are complete, so no inferred estimate is needed.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .feature_store import EvalSplit, PairDataset
from .model import ModelParams, score_collection

log = logging.getLogger(__name__)

DEFAULT_DEPTH = 1000


@dataclass
class RankedList:
    query: str
    items: list[str]
    scores: list[float]

    @property
    def depth(self) -> int:
        return len(self.items)


def rank_indices(scores: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Indices of the top ``k`` by (score desc, id asc).

    ``ids`` must be an array whose natural order is the tie-break order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    k = min(k, n)
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    if k < n:
        kth = np.partition(scores, n - k)[n - k]
        # everything tied with the k-th score competes on id
        cand = np.flatnonzero(scores >= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((ids[cand], -scores[cand]))
    return cand[order[:k]]


def rank(scores, k: int = DEFAULT_DEPTH, query: str = "") -> RankedList:
    """Top-``k`` of a ``{id: score}`` mapping, or of ``(ids, scores)``."""
    if isinstance(scores, dict):
        ids = np.array(list(scores.keys()))
        vals = np.array(list(scores.values()), dtype=np.float64)
    else:
        ids, vals = scores
        ids = np.asarray(ids)
        vals = np.asarray(vals, dtype=np.float64)
    idx = rank_indices(vals, ids, k)
    return RankedList(query, [str(ids[i]) for i in idx], [float(vals[i]) for i in idx])


def average_precision(ranked, relevant) -> float:
    """Sum over retrieved relevant ranks r of precision@r, divided by |relevant|."""
    relevant = set(relevant)
    if not relevant:
        raise ValueError("empty relevance set")
    items = ranked.items if isinstance(ranked, RankedList) else list(ranked)
    hits = 0
    total = 0.0
    for r, item in enumerate(items, 1):
        if item in relevant:
            hits += 1
            total += hits / r
    return total / len(relevant)


def precision_at(ranked, relevant, k: int) -> float:
    items = ranked.items if isinstance(ranked, RankedList) else list(ranked)
    relevant = set(relevant)
    return sum(1 for item in items[:k] if item in relevant) / k


def iou(a, b) -> float:
    a, b = set(a), set(b)
    union = a | b
    return len(a & b) / len(union) if union else 1.0


def inter_space_iou(per_space: list[list[list[str]]], k: int = 20):
    """Mean-over-queries IoU of every pair of spaces' top-``k`` sets.

    ``per_space[s][q]`` is space ``s``'s ranked item list for query ``q``.
    Returns ``(matrix, mean off-diagonal entry)``.
    """
    n = len(per_space)
    if n < 2:
        raise ValueError("IoU needs at least two spaces")
    n_queries = len(per_space[0])
    for lists in per_space:
        if len(lists) != n_queries:
            raise ValueError("every space needs a list per query")
        for lst in lists:
            if len(lst) < k:
                raise ValueError(f"ranked list depth {len(lst)} < k={k}")
    tops = [[set(lst[:k]) for lst in lists] for lists in per_space]
    mat = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            v = float(np.mean([iou(a, b) for a, b in zip(tops[i], tops[j])]))
            mat[i, j] = mat[j, i] = v
    off = mat[~np.eye(n, dtype=bool)]
    return mat, float(off.mean())


@dataclass
class EvalReport:
    queries: list[str]
    ap: dict[str, float]
    precision: dict[int, dict[str, float]]
    iou_matrix: np.ndarray | None = None
    iou_mean: float | None = None
    skipped: list[str] = field(default_factory=list)

    @property
    def map(self) -> float:
        return float(np.mean(list(self.ap.values()))) if self.ap else 0.0

    def mean_precision(self, k: int) -> float:
        vals = self.precision[k]
        return float(np.mean(list(vals.values()))) if vals else 0.0

    def summary(self) -> str:
        lines = [
            "metric: full-judgment AP (complete relevance sets)",
            f"queries: {len(self.ap)}",
            f"mAP: {self.map:.6f}",
        ]
        for k in sorted(self.precision):
            lines.append(f"P@{k}: {self.mean_precision(k):.6f}")
        if self.iou_mean is not None:
            lines.append(f"inter-space IoU (mean off-diagonal): {self.iou_mean:.6f}")
        if self.skipped:
            lines.append(f"skipped (no judgments): {len(self.skipped)}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, prefix: str = "eval") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ks = sorted(self.precision)
        with open(out_dir / f"{prefix}_per_query.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["query", "ap"] + [f"p@{k}" for k in ks])
            for q in self.ap:
                w.writerow([q, repr(self.ap[q])] + [repr(self.precision[k][q]) for k in ks])
        (out_dir / f"{prefix}_summary.txt").write_text(self.summary(), encoding="utf-8")
        if self.iou_matrix is not None:
            write_iou_csv(out_dir / f"{prefix}_iou.csv", self.iou_matrix)


def write_iou_csv(path, matrix: np.ndarray, labels=None) -> None:
    n = matrix.shape[0]
    labels = labels or [f"space{s}" for s in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + labels)
        for s in range(n):
            w.writerow([labels[s]] + [repr(float(x)) for x in matrix[s]])


def space_labels(params: ModelParams, dataset: PairDataset | None = None) -> list[str]:
    if dataset is not None and params.topology == "lpd":
        return [f"text:{t.name}" for t in dataset.text_tables] + [
            f"video:{t.name}" for t in dataset.video_tables
        ]
    return [f"space{s}" for s in range(params.n_spaces)]


def evaluate(
    params: ModelParams,
    dataset: PairDataset,
    split: EvalSplit,
    depth: int = DEFAULT_DEPTH,
    precision_ks=(20,),
    iou_k: int | None = None,
    chunk_size: int = 4096,
) -> EvalReport:
    """Score the split's collection for every query and compute the metrics.

    With ``iou_k`` set, every space is also ranked on its own and the
    inter-space IoU of the top-``iou_k`` sets is reported.
    """
    queries = list(split.queries)
    ids = np.array(split.collection)
    per_space, agg = score_collection(
        dataset.text_features(queries), dataset.video_features(split.collection), params, chunk_size
    )
    ap, prec, skipped = {}, {k: {} for k in precision_ks}, []
    for qi, q in enumerate(queries):
        relevant = split.relevance.get(q, set())
        if not relevant:
            log.warning("query %s has no judgments, skipped", q)
            skipped.append(q)
            continue
        top = ids[rank_indices(agg[qi], ids, depth)]
        items = top.tolist()
        ap[q] = average_precision(items, relevant)
        for k in precision_ks:
            prec[k][q] = precision_at(items, relevant, k)
    report = EvalReport(queries, ap, prec, skipped=skipped)
    if iou_k is not None:
        lists = [
            [ids[rank_indices(per_space[s, qi], ids, iou_k)].tolist() for qi in range(len(queries))]
            for s in range(params.n_spaces)
        ]
        report.iou_matrix, report.iou_mean = inter_space_iou(lists, iou_k)
    return report

"""Retrieval quality: AP@R, MAP, precision@r, recall@r and 11-point PR curves.

Relevance is label overlap: a database item is relevant to a query when the
two share at least one concept. Rankings are arrays of database indices,
best first.
"""

from __future__ import annotations

import csv
import io
import json
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import CcqModel, ModalDataset
from .encoder import JOINT, PackedCodes
from .search import SearchResult, build_query_table, search

MODALITY_NAMES = ("I", "T")
TASKS = {
    # name: (query modality, database tag)
    "I2I": (0, "I"),
    "T2T": (1, "T"),
    "I2T": (0, "T"),
    "T2I": (1, "I"),
    "I2IT": (0, "IT"),
    "T2IT": (1, "IT"),
}
RECALL_LEVELS = np.linspace(0.0, 1.0, 11)


def average_precision(ranked_relevance: Sequence[bool]) -> float:
    """AP over the given ranking; 0 when nothing relevant was retrieved.

    Accumulated in exact rational arithmetic and rounded once.

    >>> average_precision([True, False, True])
    0.8333333333333334
    """
    rel = np.asarray(ranked_relevance, dtype=bool)
    if rel.size == 0:
        raise ValueError("empty ranking")
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        return 0.0
    total = sum(Fraction(k, int(pos) + 1) for k, pos in enumerate(hits, start=1))
    return float(total / hits.size)


class RelevanceJudge:
    """Ground truth from multi-hot concept labels (rows are objects)."""

    def __init__(self, query_labels: np.ndarray, db_labels: np.ndarray):
        self.query_labels = np.asarray(query_labels, dtype=bool)
        self.db_labels = np.asarray(db_labels, dtype=bool)
        if self.query_labels.shape[1] != self.db_labels.shape[1]:
            raise ValueError("query and database label vocabularies differ")
        self._counts = None

    def relevant(self, query: int, items: np.ndarray) -> np.ndarray:
        lab = self.query_labels[query]
        return (self.db_labels[np.asarray(items, dtype=int)] & lab).any(axis=1)

    def num_relevant(self, query: int) -> int:
        if self._counts is None:
            self._counts = (
                self.query_labels.astype(np.int64) @ self.db_labels.T.astype(np.int64) > 0
            ).sum(axis=1)
        return int(self._counts[query])


def _ranking(r) -> np.ndarray:
    return np.asarray(r.indices if isinstance(r, SearchResult) else r, dtype=int)


def map_at_r(results, judge: RelevanceJudge, r: int = 50) -> float:
    aps = [average_precision(judge.relevant(i, _ranking(res)[:r])) for i, res in enumerate(results)]
    return float(np.mean(aps)) if aps else 0.0


def precision_recall_at_r(results, judge: RelevanceJudge, r_max: int):
    """Mean precision@r and recall@r for r = 1..r_max.

    Queries with no relevant item in the database count as recall 0.
    """
    prec = np.zeros(r_max)
    rec = np.zeros(r_max)
    for i, res in enumerate(results):
        rel = judge.relevant(i, _ranking(res)[:r_max]).astype(float)
        if rel.size < r_max:
            rel = np.concatenate([rel, np.zeros(r_max - rel.size)])
        hits = np.cumsum(rel)
        prec += hits / np.arange(1, r_max + 1)
        total = judge.num_relevant(i)
        if total:
            rec += hits / total
    n = max(len(results), 1)
    return prec / n, rec / n


def precision_at_r_curve(results, judge: RelevanceJudge, r_max: int) -> np.ndarray:
    return precision_recall_at_r(results, judge, r_max)[0]


def precision_recall_curve(results, judge: RelevanceJudge) -> tuple[np.ndarray, np.ndarray]:
    """11-point interpolated precision averaged over queries.

    Each ranking should cover the whole database so recall can reach 1.
    Queries with no relevant item in the database are skipped.
    """
    curves = []
    for i, res in enumerate(results):
        total = judge.num_relevant(i)
        if total == 0:
            continue
        rel = judge.relevant(i, _ranking(res))
        hits = np.cumsum(rel)
        precision = hits / np.arange(1, rel.size + 1)
        recall = hits / total
        interp = [
            precision[recall >= level].max() if np.any(recall >= level) else 0.0
            for level in RECALL_LEVELS
        ]
        curves.append(interp)
    if not curves:
        return RECALL_LEVELS.copy(), np.zeros_like(RECALL_LEVELS)
    return RECALL_LEVELS.copy(), np.mean(curves, axis=0)


@dataclass
class TaskReport:
    map: float
    map_r: int
    precision_at_r: list[float]
    recall_at_r: list[float]
    pr_recall: list[float]
    pr_precision: list[float]
    num_queries: int


@dataclass
class EvalReport:
    tasks: dict[str, TaskReport] = field(default_factory=dict)
    skipped: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"tasks": {k: asdict(v) for k, v in self.tasks.items()}, "skipped": self.skipped},
            indent=2,
        )

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out)
        w.writerow(["task", "r", "precision", "recall"])
        for name, t in self.tasks.items():
            for r, (p, rc) in enumerate(zip(t.precision_at_r, t.recall_at_r), start=1):
                w.writerow([name, r, f"{p:.6f}", f"{rc:.6f}"])
        return out.getvalue()


def evaluate_rankings(results, judge: RelevanceJudge, map_r: int = 50, r_max=None) -> TaskReport:
    n_db = len(judge.db_labels)
    r_max = min(n_db, 1000) if r_max is None else r_max
    prec, rec = precision_recall_at_r(results, judge, r_max)
    levels, pr = precision_recall_curve(results, judge)
    return TaskReport(
        map_at_r(results, judge, map_r),
        map_r,
        prec.tolist(),
        rec.tolist(),
        levels.tolist(),
        pr.tolist(),
        len(results),
    )


def run_protocol(
    model: CcqModel,
    databases: Mapping[str, PackedCodes],
    db_labels: Mapping[str, np.ndarray],
    queries: ModalDataset,
    map_r: int = 50,
    r_max: int | None = None,
    tasks: Sequence[str] | None = None,
    exclude_self: bool = False,
) -> EvalReport:
    """Run the retrieval schemes I2I, T2T, I2T, T2I, I2IT and T2IT.

    ``databases`` maps a tag (``"I"``, ``"T"`` or ``"IT"`` for fused paired
    codes) to packed codes, ``db_labels`` the same tags to label matrices.
    Query features and labels come from ``queries`` with modality 0 as
    images and 1 as texts. Schemes whose inputs are missing are skipped and
    listed in ``EvalReport.skipped``. ``exclude_self`` removes database item
    ``i`` from the results of query ``i``.
    """
    report = EvalReport()
    if queries.labels is None:
        raise ValueError("queries need labels for evaluation")
    for name in tasks or TASKS:
        qv, tag = TASKS[name]
        if qv >= queries.num_modalities or len(queries.features[qv]) == 0:
            report.skipped[name] = f"no {MODALITY_NAMES[qv]} queries"
            continue
        if tag not in databases or tag not in db_labels:
            report.skipped[name] = f"no {tag} database"
            continue
        if qv >= len(model.mappings):
            report.skipped[name] = "model has no mapping for the query modality"
            continue
        db = databases[tag]
        n = db.count
        topk = n - 1 if exclude_self else n
        results = []
        for i, q in enumerate(queries.features[qv]):
            table = build_query_table(q, model, qv)
            res = search(table, db, topk, exclude=i if exclude_self else None)
            results.append(res.indices)
        judge = RelevanceJudge(queries.labels[qv], db_labels[tag])
        report.tasks[name] = evaluate_rankings(results, judge, map_r, r_max)
    return report


def database_tag(modality: int) -> str:
    return "IT" if modality == JOINT else MODALITY_NAMES[modality]

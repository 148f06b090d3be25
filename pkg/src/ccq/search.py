"""Asymmetric quantizer distance (AQD) search over packed codes.

For a query ``q`` of modality ``v`` and a database code ``b``,

    AQD = ||q - R^v chat||^2 = -2 <R^v^T q, chat> + ||chat||^2 + ||q||^2,

with ``chat = sum_m C_m[b_m]``. The last term is constant per query and is
dropped from scores; ``||q||^2 = ||R^v^T q||^2 + ||R_perp^T q||^2`` so adding
``query_sq_norm`` back gives the full distance without ever forming the
orthogonal complement. The inner products come from an ``M x K`` table built
once per query and ``||chat||^2`` from the point's norm byte.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import CcqModel
from .encoder import PackedCodes, map_to_latent
from .trainer import decode


class FingerprintMismatch(ValueError):
    """Codes were produced by a different model than the query table."""


@dataclass
class QueryTable:
    table: np.ndarray  # (M, K) inner products <R^T q, C_mk>
    query_sq_norm: float
    modality: int
    fingerprint: int
    norm_centers: np.ndarray
    codebook: np.ndarray  # kept for the exact-norm mode


@dataclass
class SearchResult:
    indices: np.ndarray
    scores: np.ndarray
    clamped: bool = False
    lookups: int = 0

    def __len__(self):
        return len(self.indices)


def build_query_table(q: np.ndarray, model: CcqModel, v: int) -> QueryTable:
    q = np.asarray(q, dtype=float)
    z = map_to_latent(q, model, v)
    table = model.codebook @ z  # (M, K, D) @ (D,)
    return QueryTable(
        table,
        float(q @ q),
        v,
        model.fingerprint(),
        model.norm_quantizer.centers,
        model.codebook,
    )


def _check(table: QueryTable, database: PackedCodes):
    if table.fingerprint != database.fingerprint:
        raise FingerprintMismatch(
            f"codes fingerprint {database.fingerprint:016x} does not match "
            f"model fingerprint {table.fingerprint:016x}"
        )


def aqd_scores(table: QueryTable, database: PackedCodes, exact_norms: bool = False) -> np.ndarray:
    """Scores for every database point: full AQD minus ``||q||^2``.

    ``exact_norms`` replaces the quantized norm byte by the exact squared
    norm of the decoded point.
    """
    _check(table, database)
    codes, nbytes = database.unpack()
    m = table.table.shape[0]
    inner = table.table[np.arange(m)[None, :], codes].sum(axis=1)
    if exact_norms:
        norms = (decode(table.codebook, codes) ** 2).sum(-1)
    else:
        norms = table.norm_centers[nbytes]
    return -2.0 * inner + norms


def aqd_score(
    table: QueryTable, codes: np.ndarray, norm_byte: int, *, exact_norm: float | None = None
) -> float:
    """Score of one unpacked code: M lookups, M additions and the norm term."""
    total = 0.0
    for m, k in enumerate(codes):
        total += table.table[m, k]
    norm = table.norm_centers[norm_byte] if exact_norm is None else exact_norm
    return -2.0 * total + norm


def _top(scores: np.ndarray, topk: int, exclude=None) -> tuple[np.ndarray, np.ndarray, bool]:
    idx = np.arange(len(scores))
    if exclude is not None:
        keep = np.ones(len(scores), dtype=bool)
        keep[np.atleast_1d(exclude)] = False
        idx, scores = idx[keep], scores[keep]
    clamped = topk > len(scores)
    if clamped:
        warnings.warn(f"requested top-{topk} from {len(scores)} points; returning all")
        topk = len(scores)
    # stable sort: ties keep ascending database index
    order = np.argsort(scores, kind="stable")[:topk]
    return idx[order], scores[order], clamped


def search(
    table: QueryTable,
    database: PackedCodes,
    topk: int,
    exact_norms: bool = False,
    exclude=None,
) -> SearchResult:
    """Exact top-``topk`` by AQD over a linear scan of ``database``.

    ``exclude`` drops database indices (e.g. the query itself when the query
    set is part of the database).
    """
    scores = aqd_scores(table, database, exact_norms)
    idx, sc, clamped = _top(scores, topk, exclude)
    return SearchResult(idx, sc, clamped, lookups=database.count * table.table.shape[0])


def exact_latent_search(q_latent: np.ndarray, latents: np.ndarray, topk: int) -> SearchResult:
    """Exact Euclidean top-``topk`` between a latent query and uncompressed latents."""
    latents = np.atleast_2d(latents)
    d2 = ((latents - np.asarray(q_latent)[None, :]) ** 2).sum(-1)
    idx, sc, clamped = _top(d2, topk)
    return SearchResult(idx, sc, clamped)

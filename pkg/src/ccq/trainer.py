"""Alternating optimisation of mappings, shared codebook and codes.

One outer iteration runs three block updates in a fixed order:

1. mappings ``R^v`` by orthogonal Procrustes on ``X^v^T Chat^v``,
2. codebook ``C`` by ridge-regularised least squares,
3. codes by ICM (warm started) or greedy residual encoding.

Every quantity that needs a pass over the data is expressed as a sum over
row batches (:class:`SufficientStats`), so the batch and mini-batch drivers
share one code path and differ only in how rows are chunked.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, replace
from typing import Callable, Iterator, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse

from .core import (
    CcqConfig,
    CcqModel,
    CodeMatrix,
    EncodeMode,
    ModalDataset,
    NormQuantizer,
    validate_config,
)

log = logging.getLogger(__name__)

EXHAUSTIVE_LIMIT = 10**6
NEAREST_CHUNK = 2048


# --------------------------------------------------------------------------
# encoding a batch of latents against a codebook


def decode(codebook: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Sum of the selected codewords, ``(N, M) -> (N, D)``."""
    codes = np.asarray(codes)
    out = np.zeros(codes.shape[:-1] + (codebook.shape[2],))
    for m in range(codebook.shape[0]):
        out += codebook[m, codes[..., m]]
    return out


def _joint(latents, weights):
    """Stack per-modality latents as ``(V, N, D)``; remember if input was one point."""
    if isinstance(latents, np.ndarray) and weights is None:
        latents = [latents]
        weights = [1.0]
    arrays = [np.asarray(z, dtype=float) for z in latents]
    single = arrays[0].ndim == 1
    stack = np.stack([np.atleast_2d(z) for z in arrays])
    w = np.ones(len(arrays)) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (stack.shape[0],):
        raise ValueError("one weight per modality latent is required")
    return stack, w, single


def _collapse(stack: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, float]:
    # sum_v w_v |z_v - c|^2 = W |zbar - c|^2 + const, zbar the weighted mean
    total = float(w.sum())
    return np.tensordot(w, stack, axes=1) / total, total


def encoding_objective(latents, codebook, codes, weights=None) -> np.ndarray:
    """Per-point ``sum_v w_v ||z_v - sum_m C_m[b_m]||^2``."""
    stack, w, single = _joint(latents, weights)
    chat = decode(codebook, np.atleast_2d(codes))
    obj = np.einsum("v,vn->n", w, ((stack - chat) ** 2).sum(-1))
    return obj[0] if single else obj


def _nearest(residual: np.ndarray, book: np.ndarray, book_sq: np.ndarray) -> np.ndarray:
    # fixed-size row chunks keep the (rows, K) score block cache-sized
    out = np.empty(residual.shape[0], dtype=np.int64)
    for a in range(0, residual.shape[0], NEAREST_CHUNK):
        block = residual[a : a + NEAREST_CHUNK]
        out[a : a + NEAREST_CHUNK] = np.argmin(book_sq[None, :] - 2.0 * block @ book.T, axis=1)
    return out


def encode_greedy(latents, codebook, weights=None) -> np.ndarray:
    """Pick codewords one book at a time, each nearest to the running residual."""
    stack, w, single = _joint(latents, weights)
    z, _ = _collapse(stack, w)
    sq = (codebook**2).sum(-1)
    codes = np.empty((z.shape[0], codebook.shape[0]), dtype=np.int64)
    residual = z.copy()
    for m in range(codebook.shape[0]):
        codes[:, m] = _nearest(residual, codebook[m], sq[m])
        residual -= codebook[m, codes[:, m]]
    return codes[0] if single else codes


def encode_icm(
    latents,
    codebook,
    init_codes=None,
    sweeps: int = 3,
    weights=None,
    history: list | None = None,
) -> np.ndarray:
    """Iterated conditional modes over the M code blocks.

    Each coordinate step re-selects ``b_m`` exhaustively with the other
    blocks fixed, so the objective never increases. Starts from
    ``init_codes`` (greedy codes when omitted) and stops after ``sweeps``
    full sweeps or a sweep with no change. When ``history`` is a list, the
    per-point objective is appended after the initial state and after every
    coordinate update.
    """
    stack, w, single = _joint(latents, weights)
    z, _ = _collapse(stack, w)
    n_books = codebook.shape[0]
    if init_codes is None:
        codes = np.atleast_2d(encode_greedy(z, codebook))
    else:
        codes = np.atleast_2d(np.array(init_codes, dtype=np.int64))
    sq = (codebook**2).sum(-1)
    if history is not None:
        history.append(encoding_objective(stack, codebook, codes, w))
    chat = decode(codebook, codes)
    for _ in range(sweeps):
        changed = False
        for m in range(n_books):
            rest = chat - codebook[m, codes[:, m]]
            new = _nearest(z - rest, codebook[m], sq[m])
            if np.any(new != codes[:, m]):
                changed = True
                codes[:, m] = new
            chat = rest + codebook[m, new]
            if history is not None:
                history.append(encoding_objective(stack, codebook, codes, w))
        if not changed:
            break
    return codes[0] if single else codes


def exhaustive_encode(latents, codebook, weights=None, limit: int = EXHAUSTIVE_LIMIT):
    """Global minimiser of the encoding objective by enumerating all K^M codes.

    Ties go to the lexicographically smallest index tuple. Test oracle only.
    """
    n_books, k, _ = codebook.shape
    if k**n_books > limit:
        raise ValueError(f"K^M = {k}^{n_books} exceeds the enumeration limit {limit}")
    stack, w, single = _joint(latents, weights)
    z, _ = _collapse(stack, w)
    # all tuples in lexicographic order, first book varies slowest
    grid = np.array(list(itertools.product(range(k), repeat=n_books)), dtype=np.int64)
    sums = decode(codebook, grid)  # (K^M, D)
    out = np.empty((z.shape[0], n_books), dtype=np.int64)
    for i in range(z.shape[0]):
        obj = np.einsum("v,vc->c", w, ((stack[:, i, None, :] - sums[None]) ** 2).sum(-1))
        out[i] = grid[np.argmin(obj)]
    return out[0] if single else out


def encode(latents, codebook, config: CcqConfig, init_codes=None, weights=None) -> np.ndarray:
    """Encode with the method and sweep count chosen in ``config``."""
    if config.encode_mode is EncodeMode.GREEDY:
        codes = encode_greedy(latents, codebook, weights)
        if config.sweeps > 1:
            codes = encode_icm(latents, codebook, codes, config.sweeps - 1, weights)
        return codes
    return encode_icm(latents, codebook, init_codes, config.sweeps, weights)


# --------------------------------------------------------------------------
# sufficient statistics


def one_hot(codes: np.ndarray, k: int) -> scipy.sparse.csr_matrix:
    """Sparse ``(N, M*K)`` indicator matrix of a code array."""
    n, m = codes.shape
    cols = (codes + k * np.arange(m)[None, :]).ravel()
    rows = np.repeat(np.arange(n), m)
    return scipy.sparse.csr_matrix((np.ones(n * m), (rows, cols)), shape=(n, m * k))


@dataclass
class SufficientStats:
    """Additive statistics for the mapping and codebook updates.

    ``cross[v] = X^v^T B^v`` (``P_v x MK``) and ``gram = sum_v w_v B^v^T B^v``.
    The Procrustes matrix ``A^v = X^v^T (B^v C)`` and the codebook target
    ``T = sum_v w_v R^v^T X^v^T B^v`` are both linear in ``cross[v]``, so one
    pass over the data serves both updates.
    """

    cross: list[np.ndarray]
    gram: np.ndarray

    @classmethod
    def zeros(cls, dims: Sequence[int], n_books: int, k: int) -> "SufficientStats":
        mk = n_books * k
        return cls([np.zeros((p, mk)) for p in dims], np.zeros((mk, mk)))

    def procrustes_matrix(self, v: int, codebook: np.ndarray) -> np.ndarray:
        return self.cross[v] @ codebook.reshape(-1, codebook.shape[-1])

    def target(self, mappings: Sequence[np.ndarray], weights: np.ndarray) -> np.ndarray:
        return sum(w * r.T @ s for w, r, s in zip(weights, mappings, self.cross))

    def copy(self) -> "SufficientStats":
        return SufficientStats([c.copy() for c in self.cross], self.gram.copy())


def accumulate_stats(
    batch: ModalDataset, codes: CodeMatrix, config: CcqConfig, stats: SufficientStats
) -> SufficientStats:
    """Add the contribution of one contiguous row batch to ``stats`` (in place)."""
    k = config.codewords_per_book
    w = config.weights
    if batch.paired_count != codes.paired_count:
        raise ValueError("batch and code slices disagree on the paired prefix")
    for v, x in enumerate(batch.features):
        b_v = codes.modality(v)
        if b_v.shape[0] != x.shape[0]:
            raise ValueError(f"modality {v}: {x.shape[0]} rows but {b_v.shape[0]} codes")
        if x.shape[1] != stats.cross[v].shape[0]:
            raise ValueError(f"modality {v}: feature dim mismatch")
        if x.shape[0] == 0:
            continue
        onehot = one_hot(b_v, k)
        stats.cross[v] += (onehot.T @ x).T
        stats.gram += w[v] * (onehot.T @ onehot).toarray()
    return stats


# --------------------------------------------------------------------------
# block updates


@dataclass
class TrainState:
    model: CcqModel
    codes: CodeMatrix
    iteration: int = 0
    objective: float = float("nan")


def iter_batches(data: ModalDataset, batch_size: int | None) -> Iterator[tuple[int, int]]:
    n = max(data.sizes)
    step = n if not batch_size else int(batch_size)
    for start in range(0, n, max(step, 1)):
        yield start, min(start + step, n)


def objective(
    data: ModalDataset, model: CcqModel, codes: CodeMatrix, batch_size: int | None = None
) -> float:
    """The weighted reconstruction loss ``sum_v w_v sum_n ||x - R^v chat_n||^2``."""
    w = model.config.weights
    total = 0.0
    for start, stop in iter_batches(data, batch_size):
        batch, cb = data.slice(start, stop), codes.slice(start, stop)
        for v, x in enumerate(batch.features):
            if x.shape[0]:
                recon = decode(model.codebook, cb.modality(v)) @ model.mappings[v].T
                total += w[v] * float(((x - recon) ** 2).sum())
    return float(total)


def compute_stats(data: ModalDataset, codes: CodeMatrix, config: CcqConfig, batch_size=None):
    stats = SufficientStats.zeros(data.dims, config.num_codebooks, config.codewords_per_book)
    for start, stop in iter_batches(data, batch_size):
        accumulate_stats(data.slice(start, stop), codes.slice(start, stop), config, stats)
    return stats


def procrustes(a: np.ndarray) -> np.ndarray:
    """Semi-orthogonal ``U V^T`` maximising ``tr(R^T A)`` for a ``P x D`` matrix ``A``."""
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite Procrustes matrix")
    u, _, vt = np.linalg.svd(a, full_matrices=False)
    return u @ vt


def update_mappings(state: TrainState, stats: SufficientStats) -> list[np.ndarray]:
    """Orthogonal Procrustes solution per modality."""
    return [
        procrustes(stats.procrustes_matrix(v, state.model.codebook))
        for v in range(len(stats.cross))
    ]


def update_codebook(
    state: TrainState, stats: SufficientStats, mappings: Sequence[np.ndarray] | None = None
) -> np.ndarray:
    """Least-squares codebook ``T (G + eps I)^-1`` with ``eps = ridge * tr(G) / MK``.

    With ``ridge == 0`` the minimum-norm least-squares solution is returned,
    so codewords never assigned are exactly zero.
    """
    cfg = state.model.config
    mappings = state.model.mappings if mappings is None else mappings
    target = stats.target(mappings, cfg.weights)  # (D, MK)
    gram = stats.gram
    if not (np.all(np.isfinite(target)) and np.all(np.isfinite(gram))):
        raise ValueError("non-finite codebook statistics")
    mk = gram.shape[0]
    eps = cfg.ridge * np.trace(gram) / mk
    if eps > 0:
        flat = scipy.linalg.solve(gram + eps * np.eye(mk), target.T, assume_a="pos")
    else:
        flat = np.linalg.lstsq(gram, target.T, rcond=None)[0]
    return flat.reshape(cfg.num_codebooks, cfg.codewords_per_book, -1)


def ridge_epsilon(config: CcqConfig, stats: SufficientStats) -> float:
    return config.ridge * float(np.trace(stats.gram)) / stats.gram.shape[0]


def reseed_unused(
    state: TrainState, data: ModalDataset, stats: SufficientStats, batch_size: int | None = None
) -> np.ndarray:
    """Move codewords no point uses onto the worst-reconstructed points.

    A reseeded codeword is set so that one badly approximated encoding unit
    (a paired row solved jointly, or an unpaired row) would be reconstructed
    exactly by swapping in that codeword. Unused codewords contribute nothing
    to the objective, so this leaves the objective unchanged; it only gives
    the next code update somewhere better to go. Units are ranked by
    decreasing error with ties broken by position, independent of batching.
    """
    model = state.model
    cfg = model.config
    k = cfg.codewords_per_book
    codebook = model.codebook.copy()
    unused = np.flatnonzero(np.diag(stats.gram) == 0)
    if unused.size == 0:
        return codebook
    w = cfg.weights

    # running top-u candidates: (error, group, row, target latent, code)
    best_err = np.empty(0)
    best_key = np.empty((0, 2), dtype=np.int64)
    best_z = np.empty((0, codebook.shape[2]))
    best_b = np.empty((0, cfg.num_codebooks), dtype=np.int64)
    n0_total = data.paired_count
    for start, stop in iter_batches(data, batch_size):
        batch, cb = data.slice(start, stop), state.codes.slice(start, stop)
        n0 = batch.paired_count
        zs = [x @ r for x, r in zip(batch.features, model.mappings)]
        units = []
        if n0:
            stack = np.stack([z[:n0] for z in zs])
            zbar, _ = _collapse(stack, w)
            err = encoding_objective(stack, codebook, cb.shared, w)
            rows = np.arange(start, start + n0)
            units.append((err, np.full(n0, -1), rows, zbar, cb.shared))
        for v, z in enumerate(zs):
            t = cb.tails[v]
            if len(t):
                err = w[v] * ((z[n0:] - decode(codebook, t)) ** 2).sum(-1)
                rows = np.arange(len(t)) + max(start, n0_total) - n0_total
                units.append((err, np.full(len(t), v), rows, z[n0:], t))
        for err, grp, rows, z, b in units:
            best_err = np.concatenate([best_err, err])
            best_key = np.concatenate([best_key, np.stack([grp, rows], 1)])
            best_z = np.concatenate([best_z, z])
            best_b = np.concatenate([best_b, b])
        order = np.lexsort((best_key[:, 1], best_key[:, 0], -best_err))[: unused.size]
        best_err, best_key, best_z, best_b = (
            best_err[order], best_key[order], best_z[order], best_b[order]
        )

    for j, flat in enumerate(unused):
        i = j % len(best_err)
        if best_err[i] <= 0:
            continue
        m, kk = divmod(int(flat), k)
        b = best_b[i]
        rest = decode(codebook, b[None])[0] - codebook[m, b[m]]
        codebook[m, kk] = best_z[i] - rest
    return codebook


def _encode_batch(batch: ModalDataset, prev: CodeMatrix, model: CcqModel) -> CodeMatrix:
    cfg = model.config
    w = cfg.weights
    latents = [x @ r for x, r in zip(batch.features, model.mappings)]
    n0 = batch.paired_count

    def step(zs, weights, old):
        new = encode(zs, model.codebook, cfg, init_codes=old, weights=weights)
        if cfg.encode_mode is EncodeMode.GREEDY:
            # greedy alone is not monotone; keep the old code where it was better
            worse = encoding_objective(zs, model.codebook, new, weights) > encoding_objective(
                zs, model.codebook, old, weights
            )
            new[worse] = old[worse]
        return new

    shared = prev.shared
    if n0:
        shared = step([z[:n0] for z in latents], w, prev.shared)
    tails = []
    for v, z in enumerate(latents):
        t = prev.tails[v]
        tails.append(step([z[n0:]], [w[v]], t) if len(t) else t)
    return CodeMatrix(shared, tails)


def update_codes(
    state: TrainState, data: ModalDataset, batch_size: int | None = None
) -> CodeMatrix:
    """Re-encode every point; paired rows get one code from the joint problem."""
    parts = [
        _encode_batch(data.slice(a, b), state.codes.slice(a, b), state.model)
        for a, b in iter_batches(data, batch_size)
    ]
    return CodeMatrix.concatenate(parts)


def initial_codes(data: ModalDataset, model: CcqModel, batch_size=None) -> CodeMatrix:
    cfg = model.config
    w = cfg.weights
    parts = []
    for start, stop in iter_batches(data, batch_size):
        batch = data.slice(start, stop)
        n0 = batch.paired_count
        zs = [x @ r for x, r in zip(batch.features, model.mappings)]
        m = cfg.num_codebooks
        shared = (
            encode_greedy([z[:n0] for z in zs], model.codebook, w)
            if n0
            else np.empty((0, m), dtype=np.int64)
        )
        tails = [
            encode_greedy(z[n0:], model.codebook) if len(z) > n0 else np.empty((0, m), np.int64)
            for z in zs
        ]
        parts.append(CodeMatrix(shared, tails))
    return CodeMatrix.concatenate(parts)


def initialize(
    data: ModalDataset,
    config: CcqConfig,
    batch_size: int | None = None,
    mappings: Sequence[np.ndarray] | None = None,
    codebook: np.ndarray | None = None,
) -> TrainState:
    """Identity-slab mappings, Gaussian codebook, codes from one greedy pass.

    Passing ``mappings`` and ``codebook`` starts from those instead.
    """
    cfg = config.resolve(data.dims)
    problems = validate_config(cfg, data)
    if problems:
        raise ValueError("invalid configuration: " + "; ".join(problems))
    if mappings is not None and codebook is not None:
        empty = NormQuantizer.fit(np.zeros(1))
        model = CcqModel(cfg, [np.array(r) for r in mappings], np.array(codebook), empty)
        codes = initial_codes(data, model, batch_size)
        return TrainState(model, codes, 0, objective(data, model, codes, batch_size))
    d = cfg.latent_dim
    mappings = [np.eye(p)[:, :d] for p in data.dims]

    # spread of the initial latents, accumulated batch-wise
    count, s1, s2 = 0, 0.0, 0.0
    for start, stop in iter_batches(data, batch_size):
        for x in data.slice(start, stop).features:
            z = x[:, :d]
            count += z.size
            s1 += float(z.sum())
            s2 += float((z**2).sum())
    std = np.sqrt(max(s2 / max(count, 1) - (s1 / max(count, 1)) ** 2, 0.0)) or 1.0

    rng = np.random.default_rng(cfg.seed)
    codebook = rng.standard_normal((cfg.num_codebooks, cfg.codewords_per_book, d))
    codebook *= std / np.sqrt(cfg.num_codebooks)
    model = CcqModel(cfg, mappings, codebook, NormQuantizer.fit(np.zeros(1)))
    codes = initial_codes(data, model, batch_size)
    return TrainState(model, codes, 0, objective(data, model, codes, batch_size))


def decoded_sq_norms(model: CcqModel, codes: CodeMatrix) -> np.ndarray:
    rows = [codes.shared] + list(codes.tails)
    allcodes = np.concatenate(rows, axis=0)
    return (decode(model.codebook, allcodes) ** 2).sum(-1)


StepCallback = Callable[[str, TrainState, SufficientStats], None]


def train(
    data: ModalDataset,
    config: CcqConfig,
    batch_size: int | None = None,
    callback: StepCallback | None = None,
) -> tuple[CcqModel, CodeMatrix]:
    """Run the alternating optimisation until convergence.

    ``batch_size`` streams rows in contiguous chunks; results match the
    full-batch run up to floating-point summation order. ``callback`` is
    invoked after each block update with the stage name (``"mappings"``,
    ``"codebook"``, ``"codes"``), the current state and the statistics the
    update consumed.

    With ``config.paired_warm_start`` and semi-paired data, the paired
    prefix is trained on its own first and the full problem starts from that
    model; ``training_log`` covers the full problem only.
    """
    warm = {}
    if config.paired_warm_start and 0 < data.paired_count < max(data.sizes):
        prefix = data.slice(0, data.paired_count)
        pre_model, _ = train(prefix, replace(config, paired_warm_start=False), batch_size)
        warm = {"mappings": pre_model.mappings, "codebook": pre_model.codebook}
        log.info("paired warm start done after %d iterations", len(pre_model.training_log) - 1)
    state = initialize(data, config, batch_size, **warm)
    model = state.model
    cfg = model.config
    model.training_log.append(state.objective)
    log.info("init objective %.6g", state.objective)

    stats = compute_stats(data, state.codes, cfg, batch_size)
    for it in range(1, cfg.max_outer_iters + 1):
        model.mappings = update_mappings(state, stats)
        if callback:
            callback("mappings", state, stats)
        model.codebook = update_codebook(state, stats)
        if cfg.reseed_unused:
            model.codebook = reseed_unused(state, data, stats, batch_size)
        if callback:
            callback("codebook", state, stats)
        state.codes = update_codes(state, data, batch_size)
        stats = compute_stats(data, state.codes, cfg, batch_size)
        if callback:
            callback("codes", state, stats)

        prev = state.objective
        state.objective = objective(data, model, state.codes, batch_size)
        state.iteration = it
        model.training_log.append(state.objective)
        log.info("iter %d objective %.6g", it, state.objective)
        if prev <= 0 or (prev - state.objective) / prev < cfg.convergence_tol:
            break

    model.norm_quantizer = NormQuantizer.fit(decoded_sq_norms(model, state.codes))
    return model, state.codes


def refit_norm_quantizer(model: CcqModel, sq_norms: np.ndarray) -> CcqModel:
    """Return a copy of ``model`` whose norm bins are fitted on ``sq_norms``."""
    return replace(model, norm_quantizer=NormQuantizer.fit(sq_norms))

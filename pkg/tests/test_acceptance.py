"""Acceptance criteria 1-11, one test each, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the criterion lines are
printed even under output capture.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import ortho_group

from ccq import CcqConfig, ModalDataset, generate_synthetic, train
from ccq.core import orthogonality_residual
from ccq.encoder import PackedCodes, encode_database, encode_points, norm_bytes
from ccq.io import dump_codes, dump_model, load_codes, load_model, save_codes, save_model
from ccq.metrics import (
    RelevanceJudge,
    average_precision,
    map_at_r,
    precision_at_r_curve,
    precision_recall_curve,
    precision_recall_at_r,
)
from ccq.search import FingerprintMismatch, aqd_scores, build_query_table, search
from ccq.trainer import (
    decode,
    encode_greedy,
    encode_icm,
    encoding_objective,
    exhaustive_encode,
    objective,
    procrustes,
    ridge_epsilon,
)

from helpers import random_dataset


@pytest.fixture
def criterion(report):
    def check(number: int, ok: bool, detail: str) -> None:
        report(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return check


def test_c01_objective_monotone(criterion):
    t0 = time.perf_counter()
    worst = -np.inf
    n_steps = 0
    for seed in range(20):
        data = random_dataset(seed)
        cfg = CcqConfig(num_codebooks=4, codewords_per_book=16, seed=seed, max_outer_iters=15)
        trace = []

        def cb(stage, state, stats):
            value = objective(data, state.model, state.codes)
            slack = 1e-9
            if stage == "codebook":
                # ridge solution is optimal for f + eps |C|^2, so f may rise by eps |C_prev|^2
                slack += ridge_epsilon(state.model.config, stats) * float((trace[-1][2] ** 2).sum())
            trace.append((value, slack, state.model.codebook.copy()))

        model, _ = train(data, cfg, callback=cb)
        values = [model.training_log[0]] + [v for v, _, _ in trace]
        slacks = [s for _, s, _ in trace]
        for prev, cur, slack in zip(values[:-1], values[1:], slacks):
            worst = max(worst, cur - prev - slack)
            n_steps += 1
        log = np.array(model.training_log)
        worst = max(worst, float(np.max(np.diff(log) - 1e-9)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 0 and elapsed < 60
    criterion(1, ok, f"max rise beyond slack {worst:.3g} over {n_steps} block updates, {elapsed:.1f}s")


def test_c02_encoding_oracle(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    codebook = rng.standard_normal((2, 4, 6))
    z = rng.standard_normal((1000, 6)) * 1.5
    greedy = encode_greedy(z, codebook)
    icm = encode_icm(z, codebook, init_codes=greedy, sweeps=3)
    best = exhaustive_encode(z, codebook)
    f_g = encoding_objective(z, codebook, greedy)
    f_i = encoding_objective(z, codebook, icm)
    f_e = encoding_objective(z, codebook, best)
    oracle_ok = bool(np.all(f_e <= f_i + 1e-12))
    icm_ok = bool(np.all(f_i <= f_g + 1e-12))
    rate = float(np.mean(np.isclose(f_e, f_i, rtol=0, atol=1e-12)))
    elapsed = time.perf_counter() - t0
    # regression bound frozen at the first measurement, 0.902
    ok = oracle_ok and icm_ok and rate >= 0.902 and elapsed < 10
    criterion(
        2,
        ok,
        f"exhaustive<=icm {oracle_ok}, icm<=greedy {icm_ok}, equality rate {rate:.3f}, {elapsed:.2f}s",
    )


def _random_semi_orthogonal(rng, p, d, count):
    q, r = np.linalg.qr(rng.standard_normal((count, p, d)))
    return q * np.sign(np.diagonal(r, axis1=1, axis2=2))[:, None, :]


def test_c03_procrustes_optimal(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    violations = 0
    worst_resid = 0.0
    for _ in range(200):
        x = rng.standard_normal((20, 6))
        z = rng.standard_normal((20, 3))
        r = procrustes(x.T @ z)
        worst_resid = max(worst_resid, orthogonality_residual(r))
        loss = ((x - z @ r.T) ** 2).sum()
        qs = _random_semi_orthogonal(rng, 6, 3, 1000)
        losses = ((x[None] - np.einsum("nd,cpd->cnp", z, qs)) ** 2).sum(axis=(1, 2))
        violations += int(np.sum(loss > losses + 1e-9))
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and worst_resid <= 1e-8 and elapsed < 30
    criterion(3, ok, f"{violations} violations in 200x1000, residual {worst_resid:.1e}, {elapsed:.1f}s")


@pytest.fixture(scope="module")
def trained():
    data = generate_synthetic(clusters=8, per_cluster=100, dims=(24, 32), noise=0.6, seed=4)
    cfg = CcqConfig(num_codebooks=4, codewords_per_book=16, seed=4, max_outer_iters=10)
    model, codes = train(data, cfg)
    return model, codes, data


def test_c04_theorem_bound(criterion, trained):
    t0 = time.perf_counter()
    model, codes, data = trained
    rng = np.random.default_rng(4)
    pairs = 10_000
    qv = rng.integers(0, 2, pairs)
    xv = rng.integers(0, 2, pairs)
    qi = rng.integers(0, 800, pairs)
    xi = rng.integers(0, 800, pairs)
    violations = 0
    worst = -np.inf
    for a in range(2):
        for b in range(2):
            sel = (qv == a) & (xv == b)
            q = data.features[a][qi[sel]]
            x = data.features[b][xi[sel]]
            b_codes = codes.modality(b)[xi[sel]]
            q_lat = q @ model.mappings[a]
            x_lat = x @ model.mappings[b]
            xhat = decode(model.codebook, b_codes)
            d_true = np.linalg.norm(q_lat - x_lat, axis=1)
            # d(q~, x^) from the table score with exact norms
            inner = np.einsum("nd,nmd->n", q_lat, model.codebook[np.arange(4), b_codes])
            d_aqd = np.sqrt(np.maximum(-2 * inner + (xhat**2).sum(1) + (q_lat**2).sum(1), 0))
            bound = np.linalg.norm(x - xhat @ model.mappings[b].T, axis=1)
            gap = np.abs(d_true - d_aqd) - bound - 1e-9
            violations += int(np.sum(gap > 0))
            worst = max(worst, float(gap.max()))
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and elapsed < 10
    criterion(4, ok, f"{violations} violations in {pairs} pairs (max gap {worst:.2e}), {elapsed:.2f}s")


def test_c05_aqd_table(criterion, trained):
    model, codes, data = trained
    rng = np.random.default_rng(5)
    db_codes = codes.modality(1)
    db = PackedCodes.from_codes(db_codes, norm_bytes(model, db_codes), model, 1)
    # AQD lifts the decoded point with the query modality's mapping
    xhat = decode(model.codebook, db_codes) @ model.mappings[0].T
    width = model.norm_quantizer.bin_width
    exact_err = byte_err = 0.0
    rank_mismatch = 0
    n_pairs = 0
    for qi in rng.choice(800, 13, replace=False):
        q = data.features[0][qi]
        table = build_query_table(q, model, 0)
        direct = ((q[None] - xhat) ** 2).sum(1)
        s_exact = aqd_scores(table, db, exact_norms=True) + table.query_sq_norm
        s_byte = aqd_scores(table, db) + table.query_sq_norm
        exact_err = max(exact_err, float(np.abs(s_exact - direct).max()))
        byte_err = max(byte_err, float(np.abs(s_byte - direct).max()))
        full_rank = np.argsort(s_exact, kind="stable")
        dropped = search(table, db, db.count, exact_norms=True).indices
        rank_mismatch += int(not np.array_equal(full_rank, dropped))
        n_pairs += db.count
    ok = exact_err <= 1e-6 and byte_err <= width and rank_mismatch == 0 and n_pairs >= 10_000
    criterion(
        5,
        ok,
        f"{n_pairs} pairs: exact err {exact_err:.1e}, byte err {byte_err:.3g} "
        f"(bin {width:.3g}), ranking mismatches {rank_mismatch}",
    )


def test_c06_planted_recovery(criterion):
    # x^v = R0^v (C0_1 a + C0_2 b), no noise
    rng = np.random.default_rng(6)
    dims, d, m, k, n = (16, 24), 8, 2, 8, 400
    c0 = rng.standard_normal((m, k, d)) * 3
    b0 = rng.integers(0, k, (n, m))
    latent = decode(c0, b0)
    feats = [latent @ ortho_group.rvs(p, random_state=rng)[:, :d].T for p in dims]
    data = ModalDataset(feats, n)
    cfg = CcqConfig(num_codebooks=m, codewords_per_book=k, latent_dim=d, seed=6, max_outer_iters=30, convergence_tol=0)
    model, _ = train(data, cfg)
    first, last = model.training_log[0], model.training_log[-1]
    ratio = last / first
    ok = ratio < 1e-6 and len(model.training_log) - 1 <= 30
    criterion(6, ok, f"final/initial objective {ratio:.3e} after {len(model.training_log) - 1} iterations")


def _map(model, queries, qv, qlabels, db_x, dv, db_labels):
    db = encode_database(db_x, model, dv)
    results = [search(build_query_table(q, model, qv), db, 50).indices for q in queries]
    return map_at_r(results, RelevanceJudge(qlabels, db_labels), 50)


def test_c07_synthetic_retrieval(criterion):
    t0 = time.perf_counter()
    full = generate_synthetic(clusters=10, per_cluster=550, dims=(64, 64), noise=2.0, seed=0)
    x, y = full.features, full.labels
    tr, qs = slice(0, 5000), slice(5000, 5500)
    cfg = CcqConfig(num_codebooks=4, codewords_per_book=256, seed=0)
    paired, _ = train(ModalDataset([x[0][tr], x[1][tr]], 5000), cfg)
    i2t = _map(paired, x[0][qs], 0, y[0][qs], x[1][tr], 1, y[1][tr])
    t2i = _map(paired, x[1][qs], 1, y[1][qs], x[0][tr], 0, y[0][tr])

    # 500 pairs plus 4500 unmatched rows per modality
    perm = 500 + np.random.default_rng(123).permutation(4500)
    semi_data = ModalDataset([x[0][tr], np.concatenate([x[1][:500], x[1][perm]])], 500)
    semi, _ = train(semi_data, cfg)
    only, _ = train(ModalDataset([x[0][:500], x[1][:500]], 500), cfg)
    semi_t2i = _map(semi, x[1][qs], 1, y[1][qs], x[0][tr], 0, y[0][tr])
    only_t2i = _map(only, x[1][qs], 1, y[1][qs], x[0][tr], 0, y[0][tr])
    elapsed = time.perf_counter() - t0
    ok = i2t >= 0.8 and t2i >= 0.8 and semi_t2i > only_t2i and elapsed < 300
    criterion(
        7,
        ok,
        f"MAP@50 I2T {i2t:.3f} T2I {t2i:.3f} (chance 0.1); T2I semi {semi_t2i:.3f} "
        f"vs paired-only {only_t2i:.3f}, {elapsed:.0f}s",
    )


def test_c08_minibatch_equivalence(criterion):
    data = random_dataset(8, n=512, n0=300)
    cfg = CcqConfig(num_codebooks=4, codewords_per_book=16, seed=8, max_outer_iters=10)
    runs = {bs: train(data, cfg, batch_size=bs) for bs in (None, 128, 64)}
    ref_model, ref_codes = runs[None]
    same_codes = True
    r_err = 0.0
    for bs, (model, codes) in runs.items():
        same_codes &= codes.equals(ref_codes)
        for r, r_ref in zip(model.mappings, ref_model.mappings):
            signs = np.sign((r * r_ref).sum(0))
            r_err = max(r_err, float(np.abs(r * signs - r_ref).max()))
    ok = same_codes and r_err <= 1e-6
    criterion(8, ok, f"batch sizes full/N/4/64: codes identical {same_codes}, max R diff {r_err:.1e}")


def _timed_train(n, seed):
    rng = np.random.default_rng(seed)
    data = ModalDataset([rng.standard_normal((n, 64)), rng.standard_normal((n, 64))], n // 2)
    cfg = CcqConfig(num_codebooks=4, codewords_per_book=256, seed=seed, max_outer_iters=3, convergence_tol=0)
    t0 = time.perf_counter()
    train(data, cfg)
    return time.perf_counter() - t0


def test_c09_linear_scaling(criterion):
    _timed_train(2000, 0)  # warm up BLAS and allocators
    small = min(_timed_train(20_000, 9) for _ in range(2))
    large = min(_timed_train(40_000, 9) for _ in range(2))
    ratio = large / small
    criterion(9, ratio <= 2.5, f"train time N=40k {large:.2f}s / N=20k {small:.2f}s = {ratio:.2f}")


def _naive_metrics(rankings, rel_matrix, r_map, r_max):
    aps, precs, recs, curves = [], [], [], []
    for i, ranking in enumerate(rankings):
        rel = [bool(rel_matrix[i, j]) for j in ranking]
        hits, s = 0, 0.0
        for pos, flag in enumerate(rel[:r_map], start=1):
            if flag:
                hits += 1
                s += hits / pos
        aps.append(s / hits if hits else 0.0)
        total = int(rel_matrix[i].sum())
        p_row, r_row = [], []
        for r in range(1, r_max + 1):
            h = sum(rel[:r])
            p_row.append(h / r)
            r_row.append(h / total if total else 0.0)
        precs.append(p_row)
        recs.append(r_row)
        if total:
            pts = [(sum(rel[:r]) / r, sum(rel[:r]) / total) for r in range(1, len(rel) + 1)]
            curves.append(
                [max([p for p, rc in pts if rc >= lvl - 1e-12], default=0.0) for lvl in np.linspace(0, 1, 11)]
            )
    return np.mean(aps), np.mean(precs, 0), np.mean(recs, 0), np.mean(curves, 0)


def test_c10_metrics(criterion):
    exact = average_precision([True, False, True]) == 5 / 6
    rng = np.random.default_rng(10)
    n_db, n_q = 60, 100
    qlab = rng.random((n_q, 5)) < 0.3
    dblab = rng.random((n_db, 5)) < 0.3
    judge = RelevanceJudge(qlab, dblab)
    rel = (qlab.astype(int) @ dblab.T.astype(int)) > 0
    rankings = [rng.permutation(n_db) for _ in range(n_q)]
    ap_n, prec_n, rec_n, pr_n = _naive_metrics(rankings, rel, 20, 30)
    prec, rec = precision_recall_at_r(rankings, judge, 30)
    _, pr = precision_recall_curve(rankings, judge)
    diffs = [
        abs(map_at_r(rankings, judge, 20) - ap_n),
        np.abs(prec - prec_n).max(),
        np.abs(precision_at_r_curve(rankings, judge, 30) - prec_n).max(),
        np.abs(rec - rec_n).max(),
        np.abs(pr - pr_n).max(),
    ]
    worst = float(max(diffs))
    ok = exact and worst <= 1e-12
    criterion(10, ok, f"AP([t,f,t]) == 5/6 {exact}; max diff vs naive oracle {worst:.1e}")


def test_c11_serialization(criterion, trained, tmp_path):
    model, _, data = trained
    save_model(model, tmp_path / "m.ccq")
    loaded = load_model(tmp_path / "m.ccq")
    model_ok = dump_model(loaded) == dump_model(model) and loaded.fingerprint() == model.fingerprint()
    model_ok &= all(np.array_equal(a, b) for a, b in zip(loaded.mappings, model.mappings))
    model_ok &= np.array_equal(loaded.codebook, model.codebook)
    db = encode_database(data.features[0], loaded, 0)
    save_codes(db, tmp_path / "c.pcq")
    back = load_codes(tmp_path / "c.pcq")
    codes_ok = dump_codes(back) == dump_codes(db) and np.array_equal(back.data, db.data)
    codes_ok &= np.array_equal(encode_points(data.features[0], model, 0)[0], db.unpack()[0])

    other = replace(model, codebook=model.codebook + 1e-3)
    rejected = False
    try:
        search(build_query_table(data.features[0][0], other, 0), back, 5)
    except FingerprintMismatch:
        rejected = True
    ok = model_ok and codes_ok and rejected
    criterion(11, ok, f"model round trip {model_ok}, codes round trip {codes_ok}, mismatch rejected {rejected}")

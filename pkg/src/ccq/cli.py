"""Command line interface: ``ccq {train,encode,search,eval,synth}``.

Every subcommand exits 0 on success. Failures exit 1 (2 for usage errors)
and print ``{"error": <type>, "message": <text>}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .core import CcqConfig, ModalDataset, code_length_bits
from .encoder import JOINT, PackedCodes, encode_joint, encode_points
from .io import (
    apply_preprocessor,
    atomic_write,
    generate_synthetic,
    load_codes,
    load_model,
    read_features,
    save_codes,
    save_model,
    write_features,
    zca_whiten,
)
from .metrics import TASKS, RelevanceJudge, evaluate_rankings, EvalReport
from .search import build_query_table, search
from .trainer import train

log = logging.getLogger("ccq")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _tagged(items: list[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        tag, sep, path = item.partition("=")
        if not sep:
            raise UsageError(f"expected TAG=PATH, got {item!r}")
        out[tag] = path
    return out


def cmd_train(args) -> None:
    loaded = [read_features(p) for p in args.data]
    xs = [x for x, _, _ in loaded]
    paired = args.paired if args.paired is not None else min(p for _, p, _ in loaded)
    pre = None
    if args.zca:
        pre = []
        for i, x in enumerate(xs):
            xs[i], transform = zca_whiten(x)
            pre.append(transform)
    k = args.K
    bits_per_book = k.bit_length() - 1
    m = args.M
    if args.bits is not None:
        if args.bits % bits_per_book:
            raise UsageError(f"--bits {args.bits} is not a multiple of log2(K)={bits_per_book}")
        if m is not None and m * bits_per_book != args.bits:
            raise UsageError("--bits disagrees with --M and --K")
        m = args.bits // bits_per_book
    m = 4 if m is None else m
    weights = tuple(args.lam) if args.lam else None
    if weights is not None and len(weights) == 1 and len(xs) > 1:
        # a single value is the weight of the second modality, the first stays 1
        weights = (1.0,) + weights * (len(xs) - 1)
    cfg = CcqConfig(
        num_modalities=len(xs),
        num_codebooks=m,
        codewords_per_book=k,
        latent_dim=args.latent_dim,
        modality_weights=weights,
        max_outer_iters=args.max_iter,
        encode_mode=args.encode_mode,
        convergence_tol=args.tol,
        seed=args.seed,
    )
    code_length_bits(cfg)
    model, _ = train(ModalDataset(xs, paired), cfg, args.batch_size)
    model.preprocessors = pre
    save_model(model, args.out)
    log.info("saved %s (fingerprint %016x)", args.out, model.fingerprint())


def _load_inputs(model, paths, modalities):
    xs = []
    for p, v in zip(paths, modalities):
        x, _, _ = read_features(p)
        pre = model.preprocessors[v] if model.preprocessors else None
        xs.append(apply_preprocessor(x, pre))
    return xs


def cmd_encode(args) -> None:
    model = load_model(args.model)
    if args.joint:
        xs = _load_inputs(model, args.data, range(len(args.data)))
        codes, nb = encode_joint(xs, model)
        packed = PackedCodes.from_codes(codes, nb, model, JOINT)
    else:
        if len(args.data) != 1:
            raise UsageError("encode takes one --data file unless --joint is given")
        (x,) = _load_inputs(model, args.data, [args.modality])
        codes, nb = encode_points(x, model, args.modality)
        packed = PackedCodes.from_codes(codes, nb, model, args.modality)
    save_codes(packed, args.out)


def cmd_search(args) -> None:
    model = load_model(args.model)
    database = load_codes(args.codes)
    (q,) = _load_inputs(model, [args.queries], [args.query_modality])
    results = []
    for i, row in enumerate(q):
        table = build_query_table(row, model, args.query_modality)
        res = search(table, database, args.topk, exclude=i if args.exclude_self else None)
        dist = res.scores + table.query_sq_norm  # full AQD, smaller is closer
        neighbors = [{"id": int(j), "score": float(s)} for j, s in zip(res.indices, dist)]
        results.append({"query_id": i, "neighbors": neighbors})
    payload = {
        "query_modality": args.query_modality,
        "database_modality": database.modality,
        "results": results,
    }
    atomic_write(args.out, json.dumps(payload).encode())


def cmd_eval(args) -> None:
    results = _tagged(args.results)
    shared = {t: read_features(p)[2] for t, p in _tagged(args.labels).items()}
    qlabels = dict(shared)
    qlabels.update({t: read_features(p)[2] for t, p in _tagged(args.query_labels).items()})
    dblabels = dict(shared)
    dblabels.update({t: read_features(p)[2] for t, p in _tagged(args.db_labels).items()})
    tasks = args.tasks.split(",") if args.tasks else list(results)
    report = EvalReport()
    for task in tasks:
        if task not in TASKS:
            raise UsageError(f"unknown task {task!r}; choose from {','.join(TASKS)}")
        qv, tag = TASKS[task]
        qtag = "IT"[qv]
        missing = [
            what
            for what, ok in (
                ("results", task in results),
                (f"{qtag} query labels", qlabels.get(qtag) is not None),
                (f"{tag} database labels", dblabels.get(tag) is not None),
            )
            if not ok
        ]
        if missing:
            report.skipped[task] = "missing " + ", ".join(missing)
            continue
        with open(results[task]) as f:
            payload = json.load(f)
        rankings = [
            np.array([n["id"] for n in r["neighbors"]], dtype=int) for r in payload["results"]
        ]
        judge = RelevanceJudge(qlabels[qtag][: len(rankings)], dblabels[tag])
        report.tasks[task] = evaluate_rankings(rankings, judge, args.map_r, args.r_max)
    atomic_write(args.out, report.to_json().encode())
    if args.curves:
        atomic_write(args.curves, report.to_csv().encode())
    for name, t in report.tasks.items():
        log.info("%s MAP@%d = %.4f", name, t.map_r, t.map)


def cmd_synth(args) -> None:
    data = generate_synthetic(
        args.clusters, args.per_cluster, tuple(args.dims), args.noise, args.paired_fraction, args.seed
    )
    out = Path(args.out)
    for v, (x, y) in enumerate(zip(data.features, data.labels)):
        write_features(out.with_name(f"{out.name}.m{v}.feat"), x, data.paired_count, y)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ccq", description="Composite correlation quantization toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="learn a model from feature files, one per modality")
    t.add_argument("--data", nargs="+", required=True)
    t.add_argument("--paired", type=int, help="paired prefix size (default: from the files)")
    t.add_argument("--bits", type=int, help="code length; sets M = bits / log2(K)")
    t.add_argument("--M", type=int)
    t.add_argument("--K", type=int, default=256)
    t.add_argument("--lambda", dest="lam", type=float, nargs="+")
    t.add_argument("--latent-dim", type=int)
    t.add_argument("--encode-mode", choices=["icm", "greedy"], default="icm")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-iter", type=int, default=30)
    t.add_argument("--tol", type=float, default=1e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--zca", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="encode a database into packed codes")
    e.add_argument("--model", required=True)
    e.add_argument("--data", nargs="+", required=True)
    e.add_argument("--modality", type=int, default=0)
    e.add_argument("--joint", action="store_true", help="fuse paired files into one code each")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_encode)

    s = sub.add_parser("search", help="AQD linear scan for every query")
    s.add_argument("--model", required=True)
    s.add_argument("--codes", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--query-modality", type=int, default=0)
    s.add_argument("--topk", type=int, default=50)
    s.add_argument("--exclude-self", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_search)

    v = sub.add_parser("eval", help="MAP and curves from search results")
    v.add_argument("--results", nargs="+", required=True, metavar="TASK=PATH")
    v.add_argument(
        "--labels", nargs="+", metavar="TAG=PATH", help="labels used for queries and database alike"
    )
    v.add_argument("--query-labels", nargs="+", metavar="I|T=PATH")
    v.add_argument("--db-labels", nargs="+", metavar="I|T|IT=PATH")
    v.add_argument("--tasks", help="comma separated, e.g. I2T,T2I")
    v.add_argument("--map-r", type=int, default=50)
    v.add_argument("--r-max", type=int)
    v.add_argument("--out", required=True)
    v.add_argument("--curves")
    v.set_defaults(func=cmd_eval)

    y = sub.add_parser("synth", help="write a clustered synthetic multimodal dataset")
    y.add_argument("--clusters", type=int, default=10)
    y.add_argument("--per-cluster", type=int, default=500)
    y.add_argument("--dims", type=int, nargs="+", default=[64, 64])
    y.add_argument("--noise", type=float, default=0.5)
    y.add_argument("--paired-fraction", type=float, default=1.0)
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--out", required=True, help="prefix; writes PREFIX.m<v>.feat")
    y.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(json.dumps({"error": "UsageError", "message": str(exc)}), file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        args.func(args)
    except UsageError as exc:
        print(json.dumps({"error": "UsageError", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # reported as JSON, never a traceback
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

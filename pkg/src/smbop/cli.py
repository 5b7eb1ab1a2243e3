"""Command-line entry point: ``smbop <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from .decoder import ABLATIONS, DecoderConfig, dump_traces, oracle_decode
from .encoder import DESK_MODEL, ModelConfig
from .evaluation import analysis_report, trace_from_json
from .model import Model
from .neural import GRAD_CHECK_OPS, GRAD_CHECK_THRESHOLDS, UnknownOp, grad_check
from .ra import TreeSyntaxError, balance, parse_tree, serialize
from .schema import DatasetError, Schema, load_dataset, save_dataset
from .sql import SqlError, ra_to_sql, transpile
from .synthetic import SizeParams, gen_synthetic
from .training import DESK_TRAIN, TrainConfig, decode_all, train

EXIT_OK, EXIT_ERROR, EXIT_INVALID = 0, 1, 2


class ValidationFailure(Exception):
    pass


def _default_seed() -> int:
    try:
        return int(os.environ.get("SMBOP_SEED", "0"))
    except ValueError:
        return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smbop", description="Bottom-up relational-algebra parser toolkit.")
    p.add_argument("--seed", type=int, default=_default_seed(), help="random seed (default: $SMBOP_SEED or 0)")
    p.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("transpile", help="convert between SQL and relational-algebra trees")
    t.add_argument("--to", choices=("ra", "sql"), required=True)
    t.add_argument("--schema", required=True, help="schema JSON file")
    t.add_argument("--balance", action="store_true", help="print the Keep-balanced tree")
    t.add_argument("text", nargs="?", default="-",
                   help="queries (--to ra) or tree serializations (--to sql), one per line; '-' or omitted reads stdin")

    g = sub.add_parser("gen", help="write a synthetic dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--max-height", type=int, default=4)
    g.add_argument("--min-height", type=int, default=1)
    g.add_argument("--max-width", type=int, help="reject queries with more gold subtrees than this at one level")
    g.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--data", required=True)
    tr.add_argument("--dev")
    tr.add_argument("--config", help="JSON config with optional 'model', 'train', 'decoder' sections")
    tr.add_argument("--out-ckpt", required=True)
    tr.add_argument("--metrics", help="CSV metrics log path")
    tr.add_argument("--steps", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--eval-every", type=int)
    tr.add_argument("--target-em", type=float)
    tr.add_argument("--k", type=int)
    tr.add_argument("--dim", type=int)
    tr.add_argument("--ablate", action="append", choices=ABLATIONS, default=[])

    d = sub.add_parser("decode", help="decode a dataset with a checkpoint")
    d.add_argument("--data", required=True)
    d.add_argument("--ckpt", required=True)
    d.add_argument("--k", type=int, default=30)
    d.add_argument("--t", type=int, default=9)
    d.add_argument("--ablate", action="append", choices=ABLATIONS, default=[])
    d.add_argument("--trace-out", required=True)

    e = sub.add_parser("eval", help="analysis report from decode traces")
    e.add_argument("--traces", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report-out", required=True)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    gc.add_argument("--op", action="append", help="op name (repeatable); default all")

    o = sub.add_parser("oracle-decode", help="decode with per-example oracle scorers")
    o.add_argument("--data", required=True)
    o.add_argument("--k", type=int, default=30)
    o.add_argument("--t", type=int, default=9)
    o.add_argument("--trace-out")
    return p


def _report_config(cfg: dict):
    print(json.dumps(cfg, sort_keys=True, default=str), file=sys.stderr)


def _load_data(path: str):
    try:
        return load_dataset(path)
    except DatasetError as exc:
        raise ValidationFailure(f"{path}: {exc}") from None


def cmd_transpile(args) -> int:
    schema = Schema.from_json(json.loads(Path(args.schema).read_text()))
    _report_config({"command": "transpile", "to": args.to, "balance": args.balance, "seed": args.seed})
    text = sys.stdin.read() if args.text == "-" else args.text
    failed = 0
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            if args.to == "ra":
                tree = transpile(line, schema)
                print(serialize(balance(tree) if args.balance else tree))
            else:
                print(ra_to_sql(parse_tree(line)))
        except (SqlError, TreeSyntaxError, TypeError) as exc:
            failed += 1
            print(f"line {lineno}: {type(exc).__name__}: {exc}", file=sys.stderr)
    return EXIT_ERROR if failed else EXIT_OK


def cmd_gen(args) -> int:
    sp = SizeParams(max_height=args.max_height, min_height=args.min_height, max_width=args.max_width)
    _report_config({"command": "gen", "seed": args.seed, "n": args.n, "size": asdict(sp)})
    save_dataset(gen_synthetic(args.seed, args.n, sp), args.out)
    return EXIT_OK


def resolve_train_config(args) -> tuple[ModelConfig, TrainConfig]:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    model = replace(DESK_MODEL, **raw.get("model", {}))
    dec = replace(DESK_TRAIN.decoder, **raw.get("decoder", {}))
    train_raw = {k: v for k, v in raw.get("train", {}).items()}
    tcfg = replace(DESK_TRAIN, **train_raw)
    overrides = {
        "max_steps": args.steps, "lr": args.lr, "batch_size": args.batch_size,
        "eval_every": args.eval_every, "target_em": args.target_em,
    }
    tcfg = replace(tcfg, **{k: v for k, v in overrides.items() if v is not None})
    if args.k is not None:
        dec = replace(dec, K=args.k)
    for flag in args.ablate:
        dec = replace(dec, **{flag: True})
    if args.dim is not None:
        model = replace(model, dim=args.dim)
    tcfg = replace(tcfg, seed=args.seed, threads=args.threads, decoder=dec)
    return replace(model, seed=args.seed), tcfg


def cmd_train(args) -> int:
    model_cfg, tcfg = resolve_train_config(args)
    data = _load_data(args.data)
    dev = _load_data(args.dev) if args.dev else None
    _report_config({"command": "train", "model": asdict(model_cfg), "train": asdict(tcfg)})
    res = train(data, tcfg, model_cfg, dev=dev, metrics_path=args.metrics, ckpt_path=args.out_ckpt)
    print(json.dumps({"steps": res.steps, "best_dev_em": res.best_em, "stopped": res.stopped}))
    return EXIT_OK


def _decoder_config(args) -> DecoderConfig:
    return DecoderConfig(K=args.k, T=args.t, **{flag: True for flag in getattr(args, "ablate", [])})


def cmd_decode(args) -> int:
    dcfg = _decoder_config(args)
    data = _load_data(args.data)
    model = Model.load(args.ckpt)
    _report_config({"command": "decode", "decoder": asdict(dcfg), "seed": args.seed, "threads": args.threads})
    traces = decode_all(model, data, dcfg, args.threads)
    dump_traces(traces, args.trace_out)
    return EXIT_OK


def cmd_eval(args) -> int:
    data = _load_data(args.data)
    with open(args.traces, encoding="utf-8") as fh:
        traces = [trace_from_json(json.loads(line)) for line in fh if line.strip()]
    if len(traces) != len(data):
        raise ValidationFailure(f"{len(traces)} traces for {len(data)} examples")
    _report_config({"command": "eval", "seed": args.seed})
    report = analysis_report(traces, data, args.report_out)
    print(json.dumps(report.summary(), sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ops = args.op or list(GRAD_CHECK_OPS)
    _report_config({"command": "gradcheck", "ops": ops, "seed": args.seed})
    ok = True
    print(f"{'op':<26} {'max_rel_err':>12} {'threshold':>10}  status")
    for op in ops:
        try:
            err = grad_check(op, args.seed)
        except UnknownOp:
            raise ValidationFailure(f"unknown op {op!r}; known: {', '.join(GRAD_CHECK_OPS)}") from None
        passed = err < GRAD_CHECK_THRESHOLDS[op]
        ok &= passed
        print(f"{op:<26} {err:>12.3e} {GRAD_CHECK_THRESHOLDS[op]:>10.0e}  {'ok' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_ERROR


def cmd_oracle_decode(args) -> int:
    dcfg = _decoder_config(args)
    data = _load_data(args.data)
    _report_config({"command": "oracle-decode", "decoder": asdict(dcfg), "seed": args.seed})
    traces = [oracle_decode(ex, dcfg, args.seed) for ex in data]
    em = sum(tr.chosen is not None and tr.chosen.canonical_key == ex.gold_tree.canonical_key for tr, ex in zip(traces, data))
    if args.trace_out:
        dump_traces(traces, args.trace_out)
    print(json.dumps({"n": len(data), "EM": em / max(1, len(data))}))
    return EXIT_OK


COMMANDS = {
    "transpile": cmd_transpile,
    "gen": cmd_gen,
    "train": cmd_train,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "oracle-decode": cmd_oracle_decode,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        with threadpool_limits(limits=1):
            return COMMANDS[args.command](args)
    except ValidationFailure as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - surface any failure as exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

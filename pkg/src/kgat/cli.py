"""Command-line driver.

Every subcommand accepts ``--config FILE`` (flat ``key = value`` lines, ``#``
comments) whose keys are the subcommand's long option names with dashes
replaced by underscores; explicit flags override the file.

Exit codes: 0 success, 1 usage / configuration, 2 data validation,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .ckg import DataError, build_ckg, dataset_stats, load_interactions, load_kg, make_triples
from .data import SynthConfig, carve_validation, prepare, write_synthetic
from .evaluation import evaluate, group_metrics, sparsity_groups
from .explain import format_path, path_record, read_labels, top_paths
from .oracle import OracleRefused
from .propagation import attention_scores, forward_all
from .training import TrainConfig, TrainingAborted, train

log = logging.getLogger("kgat")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# published counts for the public Amazon-book release
AMAZON_BOOK = {"users": 70679, "items": 24915, "interactions": 847733,
               "entities": 88572, "relations": 39, "triples": 2557746}


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------- config

def read_config(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = value
    return out


def write_config(path, values: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key in sorted(values):
            fh.write(f"{key} = {_fmt(values[key])}\n")


def _fmt(v):
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return "" if v is None else str(v)


def _bool(s):
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _int_list(s):
    if isinstance(s, list):
        return s
    return [int(x) for x in str(s).replace(" ", "").split(",") if x]



def _add_dataclass_options(p, cls, skip=()):
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        flag = "--" + f.name.replace("_", "-")
        if isinstance(default, bool):
            p.add_argument(flag, type=_bool, default=default, metavar="BOOL")
        elif isinstance(default, list):
            p.add_argument(flag, type=_int_list, default=default, metavar="A,B,...")
        else:
            p.add_argument(flag, type=type(default), default=default)


def _resolve(parser: argparse.ArgumentParser, parsers: dict, argv):
    command = next((a for a in argv if a in parsers), None)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    config = pre.parse_known_args(argv)[0].config
    if command is not None and config:
        sub = parsers[command]
        values = read_config(config)
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known - {"config"})
        if unknown:
            raise UsageError(f"invalid config keys: {', '.join(unknown)}")
        converted = {}
        for a in sub._actions:
            if a.dest in values:
                raw = values[a.dest]
                try:
                    converted[a.dest] = a.type(raw) if a.type else raw
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise UsageError(f"config key {a.dest}: {exc}") from exc
                a.required = False
        sub.set_defaults(**converted)
    return parser.parse_args(argv)


# ------------------------------------------------------------------- data

def load_dataset(data_dir, require_test: bool = True):
    d = Path(data_dir)
    train_path, test_path, val_path = d / "train.txt", d / "test.txt", d / "val.txt"
    for p in [train_path] + ([test_path] if require_test else []):
        if not p.exists():
            raise FileNotFoundError(f"missing dataset file {p}")
    inter = load_interactions(train_path, test_path if test_path.exists() else None,
                              val_path if val_path.exists() else None)
    kg_path = d / "kg_final.txt"
    kg = load_kg(kg_path, inter.num_items) if kg_path.exists() else load_kg_empty(inter.num_items)
    return inter, kg


def load_kg_empty(num_items):
    return make_triples(np.zeros((0, 3), np.int64), num_items)


def _train_config(args) -> TrainConfig:
    values = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig)}
    return TrainConfig(**values)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _load_model(ckpt_path):
    store, meta = dc.load_checkpoint(ckpt_path)
    cfg = TrainConfig(**meta["config"])
    return store, cfg


def _check_graph_matches(g, store):
    E = store["entity_embedding"]
    if E.shape[0] != g.num_nodes or store["relation_embedding"].shape[0] != g.num_ckg_relations:
        raise DataError(f"checkpoint shapes {E.shape} do not match the dataset graph "
                        f"({g.num_nodes} nodes, {g.num_ckg_relations} relations)")


# ------------------------------------------------------------- subcommands

def cmd_prep(args):
    summary = prepare(args.input, args.kg, args.out, core=args.core, train_frac=args.train_frac,
                      val_frac=args.val_frac, seed=args.seed)
    write_config(Path(args.out) / "prep_config.txt", _snapshot(args))
    _write_json(Path(args.out) / "prep_summary.json", summary)
    print(json.dumps(summary, sort_keys=True))


def cmd_stats(args):
    inter, kg = load_dataset(args.data, require_test=False)
    stats = dataset_stats(inter, kg)
    expected = {}
    if args.preset == "amazon-book":
        expected.update(AMAZON_BOOK)
    for key in stats:
        v = getattr(args, f"expected_{key}")
        if v is not None and v >= 0:
            expected[key] = v
    mismatches = {k: (stats[k], v) for k, v in expected.items() if stats[k] != v}
    for k in stats:
        mark = ""
        if k in expected:
            mark = "  ok" if k not in mismatches else f"  MISMATCH (expected {expected[k]})"
        print(f"{k:>13}: {stats[k]}{mark}")
    if args.run:
        run = Path(args.run)
        run.mkdir(parents=True, exist_ok=True)
        _write_json(run / "stats.json", {"stats": stats, "expected": expected,
                                         "mismatches": sorted(mismatches)})
    if mismatches:
        raise DataError(f"dataset statistics differ from expected values: {sorted(mismatches)}")


def cmd_synth(args):
    cfg = SynthConfig(**{f.name: getattr(args, f.name) for f in dataclasses.fields(SynthConfig)})
    summary = write_synthetic(cfg, args.out)
    print(json.dumps(summary, sort_keys=True))


def cmd_train(args):
    cfg = _train_config(args)
    inter, kg = load_dataset(args.data)
    if inter.num_val == 0 and args.val_fraction > 0:
        inter = carve_validation(inter, args.val_fraction, np.random.default_rng([cfg.seed, 17]))
    inter.validate()
    g = build_ckg(inter, kg)
    run = Path(args.run)
    run.mkdir(parents=True, exist_ok=True)
    write_config(run / "config.txt", _snapshot(args))

    log_path = run / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        def emit(record):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            if not args.quiet:
                print(" ".join(f"{k}={_short(v)}" for k, v in record.items()))

        header = {"variant": cfg.variant, "use_kge": cfg.use_kge, "attention_mode": cfg.attention_mode,
                  "aggregator": cfg.aggregator}
        fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        meta = {"config": dataclasses.asdict(cfg), "num_entities": g.num_entities,
                "num_users": g.num_users, "num_items": g.num_items, "num_relations": g.num_relations}
        try:
            result = train(g, inter, cfg, callback=emit)
        except TrainingAborted as exc:
            dc.save_checkpoint(exc.store, run / "last_good.ckpt", meta)
            raise NumericFailure(str(exc)) from exc
    meta["best_epoch"] = result.best_epoch
    dc.save_checkpoint(result.store, run / "best.ckpt", meta)
    reps = forward_all(g, cfg.layer_config(), result.store)
    target = "test" if inter.num_test else "train"
    report = evaluate(reps, inter, ks=(cfg.eval_k,), target=target, workers=cfg.eval_workers)
    metrics = {"target": target, "best_epoch": result.best_epoch, **report["metrics"]}
    _write_json(run / "metrics.json", metrics)
    print(json.dumps(metrics, sort_keys=True))


def _short(v):
    return f"{v:.5f}" if isinstance(v, float) else str(v)


def cmd_eval(args):
    store, cfg = _load_model(args.ckpt)
    inter, kg = load_dataset(args.data)
    g = build_ckg(inter, kg)
    _check_graph_matches(g, store)
    reps = forward_all(g, cfg.layer_config(), store)
    ks = tuple(args.k)
    report = evaluate(reps, inter, ks=ks, target=args.target, workers=args.workers)
    out = {"target": args.target, "overall": report["metrics"]}
    if args.groups > 1:
        groups = sparsity_groups(inter, args.groups, users=report["users"])
        out["groups"] = group_metrics(groups, report["users"], report["_per_user"])
    for k in ks:
        print(f"recall@{k} = {out['overall'][f'recall@{k}']:.6f}   ndcg@{k} = {out['overall'][f'ndcg@{k}']:.6f}")
    for n, grp in enumerate(out.get("groups", []), 1):
        line = "  ".join(f"{m}={grp[m]:.6f}" for m in grp if "@" in m)
        print(f"group {n} (<= {grp['max_interactions']} interactions, {grp['users']} users): {line}")
    if args.run:
        run = Path(args.run)
        run.mkdir(parents=True, exist_ok=True)
        write_config(run / "eval_config.txt", _snapshot(args))
        _write_json(run / "eval_metrics.json", out)
    print(json.dumps(out, sort_keys=True))


def cmd_explain(args):
    store, cfg = _load_model(args.ckpt)
    inter, kg = load_dataset(args.data, require_test=False)
    g = build_ckg(inter, kg)
    _check_graph_matches(g, store)
    if not 0 <= args.user < g.num_users or not 0 <= args.item < g.num_items:
        raise DataError("user or item id out of range")
    att = attention_scores(g, store, cfg.attention_mode)
    max_len = args.max_len if args.max_len > 0 else max(1, len(cfg.layer_dims))
    beam = args.beam if args.beam > 0 else None
    paths = top_paths(g, att, g.user_node(args.user), args.item, max_len, beam)[: args.top]
    node_labels = read_labels(args.node_labels) if args.node_labels else None
    rel_labels = read_labels(args.relation_labels) if args.relation_labels else None
    for p in paths:
        print(path_record(p) if args.json else format_path(p, node_labels, rel_labels))
    if not paths:
        print(f"no path within {max_len} hops", file=sys.stderr)


def cmd_gradcheck(args):
    from .gradcheck import run_suite
    results = run_suite(seed=args.seed, n_coords=args.coords)
    worst = 0.0
    for r in results:
        status = "PASS" if r["passed"] else "FAIL"
        print(f"{status} {r['case']}: max violation {r['max_violation']:.3e} over {r['coords']} coords")
        worst = max(worst, r["max_violation"])
    if not all(r["passed"] for r in results):
        raise NumericFailure("finite-difference gradient check failed")


def cmd_ckpt(args):
    version, header, start = dc.read_checkpoint_header(args.path)
    print(f"checkpoint version {version}, payload offset {start}")
    for e in header["params"]:
        print(f"  {e['name']:<22} {'x'.join(map(str, e['shape'])) or 'scalar':>16}  {e['nbytes']} bytes")
    meta = header.get("meta", {})
    if meta:
        print(json.dumps(meta, sort_keys=True, indent=2))


def _snapshot(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "command", "config", "ckpt_command")}


# ----------------------------------------------------------------- parser

def build_parser():
    parser = Parser(prog="kgat", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True, parser_class=Parser)
    parsers = {}

    p = subs.add_parser("prep", help="k-core filter, re-index and split a raw dataset")
    p.add_argument("--input", required=True, help="raw 'user item item ...' file")
    p.add_argument("--kg", default=None, help="raw 'h r t' triples")
    p.add_argument("--out", required=True)
    p.add_argument("--core", type=int, default=10)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=2019)
    p.set_defaults(func=cmd_prep)
    parsers["prep"] = p

    p = subs.add_parser("stats", help="dataset statistics, optionally checked against expected counts")
    p.add_argument("--data", required=True)
    p.add_argument("--preset", choices=["none", "amazon-book"], default="none")
    for key in ("users", "items", "interactions", "entities", "relations", "triples"):
        p.add_argument(f"--expected-{key}", type=int, default=None)
    p.add_argument("--run", default=None)
    p.set_defaults(func=cmd_stats)
    parsers["stats"] = p

    p = subs.add_parser("synth", help="write a seeded synthetic dataset")
    p.add_argument("--out", required=True)
    _add_dataclass_options(p, SynthConfig)
    p.set_defaults(func=cmd_synth)
    parsers["synth"] = p

    p = subs.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True, help="output directory")
    p.add_argument("--val-fraction", type=float, default=0.1,
                   help="validation share carved per user when the dataset has no val.txt")
    p.add_argument("--quiet", type=_bool, default=False, metavar="BOOL")
    _add_dataclass_options(p, TrainConfig)
    p.set_defaults(func=cmd_train)
    parsers["train"] = p

    p = subs.add_parser("eval", help="full-ranking evaluation of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--k", type=_int_list, default=[20], metavar="K1,K2")
    p.add_argument("--target", choices=["test", "val", "train"], default="test")
    p.add_argument("--groups", type=int, default=4, help="sparsity groups (0 or 1 disables)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--run", default=None)
    p.set_defaults(func=cmd_eval)
    parsers["eval"] = p

    p = subs.add_parser("explain", help="attention paths from a user to an item")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--item", type=int, required=True)
    p.add_argument("--max-len", type=int, default=0, help="0 means the model depth")
    p.add_argument("--beam", type=int, default=32, help="0 means unbounded")
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--node-labels", default=None)
    p.add_argument("--relation-labels", default=None)
    p.add_argument("--json", type=_bool, default=False, metavar="BOOL")
    p.set_defaults(func=cmd_explain)
    parsers["explain"] = p

    p = subs.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=200)
    p.set_defaults(func=cmd_gradcheck)
    parsers["gradcheck"] = p

    p = subs.add_parser("ckpt", help="checkpoint utilities")
    ck = p.add_subparsers(dest="ckpt_command", required=True, parser_class=Parser)
    q = ck.add_parser("inspect")
    q.add_argument("path")
    q.add_argument("--config", default=None)
    q.set_defaults(func=cmd_ckpt)
    parsers["ckpt"] = q

    for name, sp in parsers.items():
        if name != "ckpt":
            sp.add_argument("--config", default=None, help="flat key = value file")
    return parser, parsers


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, parsers = build_parser()
    try:
        args = _resolve(parser, parsers, argv)
    except UsageError as exc:
        print(f"kgat: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, dc.ContractViolation) as exc:
        print(f"kgat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, OracleRefused) as exc:
        print(f"kgat: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, dc.NonFiniteError, FloatingPointError) as exc:
        print(f"kgat: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``horn-delta <group> <command> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional, Sequence, TextIO

from .batch import METRIC_CHOICES, brute_force_scores, check_coverage, mine_batch
from .bench import SCENARIOS, BenchConfig, ChecksumMismatch, _Fixture, benchmark_run, write_csv
from .catalog import SchemaError, format_candidates, generate_candidates, parse_schema
from .engine import MODES
from .join import (
    DEFAULT_BROADCAST_THRESHOLD,
    DEFAULT_MAX_GROUP_SIZE,
    FILTER_STRATEGIES,
    JOIN_STRATEGIES,
    ConfigError,
    JoinConfig,
    default_workers,
)
from .keys import CapacityError
from .metrics import METRICS, ConsistencyError, emit_scores, format_report
from .session import Session, StateError
from .store import Dictionary, ParseError, SnapshotError, TripleStore, ingest_triples
from .synth import GenerationError, GenParams, SplitSpec, generate_kb, split_updates

log = logging.getLogger("horndelta")

DOMAIN_ERRORS = (ParseError, SchemaError, SnapshotError, StateError, GenerationError, CapacityError,
                 ConfigError, ConsistencyError, ChecksumMismatch, OSError)


# -- argument helpers -----------------------------------------------------------

def _group_size(text: str) -> Optional[int]:
    if text.lower() in ("unlimited", "none", "0"):
        return None
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid group size {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("group size must be >= 1 or 'unlimited'")
    return v


def _fractions(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid fraction list {text!r}") from None


def _group_sizes(text: str) -> tuple[Optional[int], ...]:
    return tuple(_group_size(t.strip()) for t in text.split(",") if t.strip())


def _add_join_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("join tuning (results never depend on these)")
    g.add_argument("--max-group-size", type=_group_size, default=DEFAULT_MAX_GROUP_SIZE,
                   help="pairs per adjacency chunk, or 'unlimited' (default %(default)s)")
    g.add_argument("--broadcast-threshold", type=int, default=DEFAULT_BROADCAST_THRESHOLD,
                   help="auto filtering broadcasts up to this many keys (default %(default)s)")
    g.add_argument("--filter-strategy", choices=FILTER_STRATEGIES, default="auto")
    g.add_argument("--join-strategy", choices=JOIN_STRATEGIES, default="adaptive")
    g.add_argument("--workers", type=int, default=None,
                   help="worker processes (default: $HORN_DELTA_WORKERS or available cores)")


def _join_config(args: argparse.Namespace) -> JoinConfig:
    workers = args.workers if args.workers is not None else default_workers()
    return JoinConfig(
        max_group_size=args.max_group_size,
        broadcast_threshold=args.broadcast_threshold,
        filter_strategy=args.filter_strategy,
        join_strategy=args.join_strategy,
        workers=workers,
    )


def _add_report_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--min-support", type=int, default=0, help="report rules with numerator >= this (default 0)")
    p.add_argument("--min-confidence", type=float, default=0.0, help="report rules at or above this (default 0.0)")


@contextmanager
def _output(path: Optional[str]) -> Iterator[TextIO]:
    if path in (None, "-"):
        yield sys.stdout
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        yield fh


def _load_kb(kb: str, schema_path: str) -> tuple[Dictionary, object, TripleStore]:
    d = Dictionary()
    schema = parse_schema(schema_path, d)
    d, facts = ingest_triples(kb, d)
    store = TripleStore(facts)
    check_coverage(store, schema, d)
    return d, schema, store


# -- commands -------------------------------------------------------------------

def cmd_rules_gen(args) -> int:
    d = Dictionary()
    schema = parse_schema(args.schema, d)
    catalog = generate_candidates(schema, args.max_len)
    with _output(args.output) as out:
        out.writelines(format_candidates(catalog, d))
    log.info("%d candidate rules", len(catalog))
    return 0


def _write_scores(args, tables, catalog, d) -> None:
    rows = {m: emit_scores(t, catalog, d, args.min_support, args.min_confidence, m) for m, t in tables.items()}
    with _output(args.output) as out:
        out.writelines(format_report(rows))


def cmd_mine_batch(args) -> int:
    d, schema, store = _load_kb(args.kb, args.schema)
    catalog = generate_candidates(schema, args.max_len)
    res = mine_batch(store, catalog, _join_config(args), args.metric)
    log.info("mined %d facts, %d rules in %.2fs", store.fact_count, len(catalog), res.seconds)
    _write_scores(args, res.scores, catalog, d)
    return 0


def cmd_mine_oracle(args) -> int:
    d, schema, store = _load_kb(args.kb, args.schema)
    catalog = generate_candidates(schema, args.max_len)
    _write_scores(args, brute_force_scores(store, catalog, args.metric), catalog, d)
    return 0


def cmd_mine_init(args) -> int:
    s = Session.init(args.state, args.kb, args.schema, args.mode, _join_config(args), args.max_len, args.force)
    log.info("session %s: mode %s, %d facts", args.state, args.mode, s.state.store.fact_count)
    return 0


def cmd_mine_update(args) -> int:
    workers = args.workers if args.workers is not None else default_workers()
    s = Session.open(args.state, workers)
    if args.mode is not None and args.mode != s.state.mode:
        raise StateError(f"session mode is {s.state.mode}, not {args.mode}")
    for batch in args.batch:
        rep = s.update(batch)
        log.info("batch %s: %d new facts, %d rules changed, %.2fs", batch, len(rep.batch), len(rep.delta), rep.seconds)
    if args.output:
        with _output(args.output) as out:
            out.writelines(s.report_lines(args.min_support, args.min_confidence))
    return 0


def cmd_synth_gen(args) -> int:
    params = GenParams(args.entities, args.predicates, args.facts, args.skew, args.types, args.seed, args.hub_degree)
    log.info("generating with seed %d", args.seed)
    kb = generate_kb(params)
    kb.write(args.out)
    return 0


def cmd_synth_split(args) -> int:
    spec = SplitSpec(args.base, args.updates, args.seed)
    spec.validate()
    log.info("splitting with seed %d", args.seed)
    with open(args.kb, encoding="utf-8") as fh:
        split_updates(fh.readlines(), spec, args.out)
    return 0


def cmd_bench_run(args) -> int:
    gen = GenParams(args.entities, args.predicates, args.facts, args.skew, args.types, args.seed, args.hub_degree)
    cfg = BenchConfig(gen=gen, update_fraction=args.update_fraction, update_fractions=args.update_fractions,
                      split_seed=args.split_seed, group_sizes=args.group_sizes, mode=args.mode,
                      repeats=args.repeats, join=_join_config(args))
    if (args.kb is None) != (args.schema is None):
        raise ConfigError("--kb and --schema go together")
    if args.kb is not None:
        d = Dictionary()
        schema = parse_schema(args.schema, d)
        d, facts = ingest_triples(args.kb, d)
        log.info("benchmark on %s, split seed %d", args.kb, args.split_seed)
        fixture = _Fixture(cfg, (schema, facts))
    else:
        log.info("benchmark seed %d, split seed %d", args.seed, args.split_seed)
        fixture = _Fixture(cfg)
    with _output(args.output) as out:
        for i, sc in enumerate(args.scenario):
            write_csv(benchmark_run(sc, cfg, fixture), out, header=i == 0)
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="horn-delta", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    top = p.add_subparsers(dest="group", required=True, metavar="{rules,mine,synth,bench}")

    rules = top.add_parser("rules", help="candidate rules").add_subparsers(dest="command", required=True)
    c = rules.add_parser("gen", help="enumerate candidate rules from a schema")
    c.add_argument("--schema", required=True)
    c.add_argument("--max-len", type=int, choices=(2, 3), default=3)
    c.add_argument("-o", "--output")
    c.set_defaults(func=cmd_rules_gen)

    mine = top.add_parser("mine", help="score rules").add_subparsers(dest="command", required=True)
    for name, func, helptext in (("batch", cmd_mine_batch, "score all rules over a KB"),
                                 ("oracle", cmd_mine_oracle, "brute-force scores (small KBs)")):
        c = mine.add_parser(name, help=helptext)
        c.add_argument("--kb", required=True)
        c.add_argument("--schema", required=True)
        c.add_argument("--metric", choices=METRIC_CHOICES, default="stdconf")
        c.add_argument("--max-len", type=int, choices=(2, 3), default=3)
        c.add_argument("-o", "--output")
        _add_report_flags(c)
        if name == "batch":
            _add_join_flags(c)
        c.set_defaults(func=func)

    c = mine.add_parser("init", help="start an incremental session from a base KB")
    c.add_argument("--state", required=True)
    c.add_argument("--kb", required=True)
    c.add_argument("--schema", required=True)
    c.add_argument("--mode", choices=MODES, default="search")
    c.add_argument("--max-len", type=int, choices=(2, 3), default=3)
    c.add_argument("--force", action="store_true", help="overwrite an existing session")
    _add_join_flags(c)
    c.set_defaults(func=cmd_mine_init)

    c = mine.add_parser("update", help="apply fact batches to a session")
    c.add_argument("--state", required=True)
    c.add_argument("--batch", required=True, action="append", help="batch TSV (repeatable)")
    c.add_argument("--mode", choices=MODES, help="assert the session's mode")
    c.add_argument("--workers", type=int, default=None)
    c.add_argument("-o", "--output", help="also write a filtered score report here")
    _add_report_flags(c)
    c.set_defaults(func=cmd_mine_update)

    synth = top.add_parser("synth", help="synthetic data").add_subparsers(dest="command", required=True)
    c = synth.add_parser("gen", help="generate a skewed typed KB")
    c.add_argument("--out", required=True)
    _add_gen_flags(c)
    c.set_defaults(func=cmd_synth_gen)

    c = synth.add_parser("split", help="split a KB into base and update batches")
    c.add_argument("--kb", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--base", type=float, default=0.9)
    c.add_argument("--updates", type=_fractions, default=(0.1,), help="comma-separated fractions")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_synth_split)

    bench = top.add_parser("bench", help="timing scenarios").add_subparsers(dest="command", required=True)
    c = bench.add_parser("run", help="run benchmark scenarios on a generated KB")
    c.add_argument("scenario", nargs="+", choices=SCENARIOS)
    _add_gen_flags(c, facts=1_000_000, entities=400_000, predicates=60, seed=1)
    c.add_argument("--kb", help="benchmark an existing KB instead of generating one")
    c.add_argument("--schema")
    c.add_argument("--update-fraction", type=float, default=0.1)
    c.add_argument("--update-fractions", type=_fractions, default=(0.01, 0.05, 0.1))
    c.add_argument("--split-seed", type=int, default=0)
    c.add_argument("--group-sizes", type=_group_sizes, default=(1000, 5000, 10_000, 30_000, 50_000, None))
    c.add_argument("--mode", choices=MODES, default="xconf")
    c.add_argument("--repeats", type=int, default=1)
    c.add_argument("-o", "--output")
    _add_join_flags(c)
    c.set_defaults(func=cmd_bench_run)
    return p


def _add_gen_flags(p, facts: int = 100_000, entities: int = 50_000, predicates: int = 20, seed: int = 0) -> None:
    p.add_argument("--entities", type=int, default=entities)
    p.add_argument("--predicates", type=int, default=predicates)
    p.add_argument("--facts", type=int, default=facts)
    p.add_argument("--skew", type=float, default=2.0, help="degree power-law exponent (> 1)")
    p.add_argument("--types", type=int, default=4)
    p.add_argument("--hub-degree", type=int, default=0)
    p.add_argument("--seed", type=int, default=seed)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except DOMAIN_ERRORS as e:
        print(f"horn-delta: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

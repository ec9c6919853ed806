"""Whole-KB rule scoring, plus a deliberately naive oracle for tests."""
from __future__ import annotations

import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .catalog import TEMPLATE_BY_ID, PredicateSchema, RuleCatalog, SchemaError, missing_predicates
from .join import (
    CountSink,
    DistinctSink,
    JoinConfig,
    JoinStats,
    Sink,
    TeeSink,
    apply_single,
    join_sides,
    orient,
    rule_tables,
)
from .keys import isin_sorted, pack3, unpack3
from .metrics import STDCONF, XCONF, ScoreTable, delta_from_counts
from .store import Dictionary, TripleStore

BOTH = "both"
METRIC_CHOICES = (STDCONF, XCONF, BOTH)


@dataclass
class BatchResult:
    scores: dict[str, ScoreTable]
    intermediate: Optional[np.ndarray] = None  # sorted packed (rule, x, y)
    stats: JoinStats = field(default_factory=JoinStats)
    seconds: float = 0.0


def check_coverage(store: TripleStore, schema: PredicateSchema, dictionary: Optional[Dictionary] = None) -> None:
    """Raise :class:`SchemaError` naming every KB predicate the schema lacks."""
    missing = missing_predicates(schema, store.predicates.tolist())
    if missing:
        names = [dictionary.term(p) if dictionary is not None else str(p) for p in missing]
        raise SchemaError("predicates missing from schema: " + ", ".join(names))


def _metrics_for(metric: str) -> tuple[bool, bool]:
    if metric not in METRIC_CHOICES:
        raise ValueError(f"unknown metric {metric!r}")
    return metric in (STDCONF, BOTH), metric in (XCONF, BOTH)


def mine_batch(
    store: TripleStore,
    catalog: RuleCatalog,
    config: Optional[JoinConfig] = None,
    metric: str = STDCONF,
    schema: Optional[PredicateSchema] = None,
    dictionary: Optional[Dictionary] = None,
    keep_intermediate: bool = False,
) -> BatchResult:
    """Score every candidate rule over the whole store.

    The join kernel runs with the full store on both sides, so no entity
    filter is needed. ``stdconf`` counts distinct predictions per rule and
    ``xconf`` counts body paths; ``both`` computes them in one pass.
    """
    if schema is not None:
        check_coverage(store, schema, dictionary)
    config = config or JoinConfig()
    want_std, want_x = _metrics_for(metric)
    want_std = want_std or keep_intermediate
    t0 = time.perf_counter()
    n_rules = len(catalog)
    heads = catalog.head_array
    std_num = np.zeros(n_rules, dtype=np.int64)
    std_den = np.zeros(n_rules, dtype=np.int64)
    x_num = np.zeros(n_rules, dtype=np.int64)
    x_den = np.zeros(n_rules, dtype=np.int64)
    kept: list[np.ndarray] = []
    stats = JoinStats()

    for table in rule_tables(catalog.rules):
        t = table.template
        sinks: list[Sink] = []
        distinct = counts = None
        if want_std:
            distinct = DistinctSink()
            sinks.append(distinct)
        if want_x:
            counts = CountSink(heads, store.key_set)
            sinks.append(counts)
        sink = sinks[0] if len(sinks) == 1 else TeeSink(*sinks)
        if t.arity == 1:
            apply_single(store.with_predicates(table.body1), table, sink)
        else:
            left = orient(store.with_predicates(table.body1), t, 0)
            right = orient(store.with_predicates(table.body2), t, 1)
            join_sides(left, right, table, config, sink, stats)
        if counts is not None:
            hits, paths = counts.result()
            x_num += hits
            x_den += paths
        if distinct is not None:
            keys = distinct.result()
            rule, x, y = unpack3(keys)
            hit = store.contains_keys(pack3(heads[rule], x, y))
            std_den += np.bincount(rule, minlength=n_rules)
            std_num += np.bincount(rule[hit], minlength=n_rules)
            if keep_intermediate:
                kept.append(keys)

    scores: dict[str, ScoreTable] = {}
    if metric in (STDCONF, BOTH):
        scores[STDCONF] = delta_from_counts(std_num, std_den)
    if metric in (XCONF, BOTH):
        scores[XCONF] = delta_from_counts(x_num, x_den)
    inter = None
    if keep_intermediate:
        # rule ids grow with template order, so per-template blocks concatenate sorted
        inter = np.concatenate(kept) if kept else np.zeros(0, dtype=np.int64)
    return BatchResult(scores, inter, stats, time.perf_counter() - t0)


def brute_force_scores(store: TripleStore, catalog: RuleCatalog, metric: str = STDCONF) -> dict[str, ScoreTable]:
    """Scores by pairing every fact with every fact; for small KBs only.

    No store indices, filtering, grouping or branch choice: each template's
    body pairs come from a dense equality test on the connecting variable.
    """
    want_std, want_x = _metrics_for(metric)
    facts = list(zip(store.p.tolist(), store.s.tolist(), store.o.tolist()))
    present = set(facts)
    P = np.array([f[0] for f in facts], dtype=np.int64)
    S = np.array([f[1] for f in facts], dtype=np.int64)
    O = np.array([f[2] for f in facts], dtype=np.int64)

    paths: Counter = Counter()  # (rule_id, x, y) -> number of body paths
    for r in catalog.rules:
        t = TEMPLATE_BY_ID[r.template]
        if t.arity != 1:
            continue
        for p, s, o in facts:
            if p == r.body1:
                x, y = (s, o) if t.x_first else (o, s)
                paths[(r.rule_id, x, y)] += 1

    by_template: dict[str, dict[tuple[int, int], list[int]]] = defaultdict(lambda: defaultdict(list))
    for r in catalog.rules:
        if r.body2 is not None:
            by_template[r.template][(r.body1, r.body2)].append(r.rule_id)
    for tid, rules in by_template.items():
        t = TEMPLATE_BY_ID[tid]
        z1, x1 = (O, S) if t.x_first else (S, O)
        z2, y2 = (S, O) if t.y_last else (O, S)
        match = z1[:, None] == z2[None, :]
        for i, j in zip(*np.nonzero(match)):
            for rid in rules.get((int(P[i]), int(P[j])), ()):
                paths[(rid, int(x1[i]), int(y2[j]))] += 1

    heads = {r.rule_id: r.head for r in catalog.rules}
    std: dict[int, list[int]] = defaultdict(lambda: [0, 0])
    xc: dict[int, list[int]] = defaultdict(lambda: [0, 0])
    for (rid, x, y), n in paths.items():
        exists = (heads[rid], x, y) in present
        std[rid][0] += int(exists)
        std[rid][1] += 1
        xc[rid][0] += n * int(exists)
        xc[rid][1] += n
    out: dict[str, ScoreTable] = {}
    if want_std:
        out[STDCONF] = {r: (v[0], v[1]) for r, v in std.items()}
    if want_x:
        out[XCONF] = {r: (v[0], v[1]) for r, v in xc.items()}
    return out

"""Incremental score maintenance over a stream of fact batches.

Per batch ``tau`` against the cumulated store ``base``:

1. ``inc_infer`` streams the new body paths: those using at least one fact of
   ``tau`` (as body1, as body2, or as both).
2. ``infer_update_<mode>`` turns them into denominator increments, checking
   head existence against the *pre-union* store.
3. ``base |= tau``.
4. ``check_update_<mode>`` credits numerators for facts of ``tau`` that are
   heads of predictions already counted.

Modes differ in how already-known predictions are recognised:
``vanilla`` keeps the distinct prediction set materialised, ``search``
regenerates the relevant slice from the store, and ``xconf`` counts paths and
needs no deduplication at all.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .batch import mine_batch
from .catalog import CandidateRule, RuleCatalog
from .join import (
    CountSink,
    DistinctSink,
    JoinConfig,
    JoinStats,
    MatchSink,
    Prediction,
    Predictions,
    RuleTable,
    Sink,
    apply_single,
    member_mask,
    join_sides,
    orient,
    rule_tables,
    search_into,
)
from .keys import isin_sorted, pack3, setdiff_sorted, union_sorted, unpack3
from .metrics import STDCONF, XCONF, ConsistencyError, ScoreDelta, ScoreTable, delta_from_counts
from .store import Facts, TripleStore, UpdateBatch, _ranges, apply_update

log = logging.getLogger(__name__)

VANILLA, SEARCH = "vanilla", "search"
MODES = (VANILLA, SEARCH, XCONF)
MODE_METRIC = {VANILLA: STDCONF, SEARCH: STDCONF, XCONF: XCONF}


class IntermediateStore:
    """The materialised distinct prediction set, as sorted packed ``(rule, x, y)``.

    A second ordering by predicted fact ``(head, x, y)`` answers "which rules
    predict this fact". The packed fact key equals the store's triple key, so
    batch facts can be looked up directly.
    """

    def __init__(self, keys: np.ndarray, heads: np.ndarray):
        self.keys = np.asarray(keys, dtype=np.int64)
        self.heads = heads
        rule, x, y = unpack3(self.keys)
        fact = pack3(heads[rule], x, y)
        order = np.argsort(fact, kind="stable")
        self.fact_keys = fact[order]
        self.fact_rules = rule[order]

    @classmethod
    def empty(cls, heads: np.ndarray) -> "IntermediateStore":
        return cls(np.zeros(0, dtype=np.int64), heads)

    def __len__(self) -> int:
        return int(self.keys.size)

    def __contains__(self, pred: object) -> bool:
        if isinstance(pred, Prediction):
            key = pack3([pred.rule_id], [pred.subject], [pred.object])
        else:
            key = pack3(*([v] for v in pred))  # type: ignore[misc]
        return bool(isin_sorted(key, self.keys)[0])

    def with_keys(self, new_keys: np.ndarray) -> "IntermediateStore":
        return IntermediateStore(union_sorted(self.keys, new_keys), self.heads)

    def rules_for(self, fact_keys: np.ndarray) -> np.ndarray:
        """Rule id of every (fact, rule) entry whose predicted fact is in ``fact_keys``."""
        lo = np.searchsorted(self.fact_keys, fact_keys)
        hi = np.searchsorted(self.fact_keys, fact_keys, side="right")
        return self.fact_rules[_ranges(lo, hi)]

    def predictions(self) -> Predictions:
        rule, x, y = unpack3(self.keys)
        return Predictions(rule, x, y, self.heads[rule])


@dataclass
class EngineConfig:
    mode: str = SEARCH
    join: JoinConfig = field(default_factory=JoinConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def metric(self) -> str:
        return MODE_METRIC[self.mode]


@dataclass
class EngineState:
    store: TripleStore
    catalog: RuleCatalog
    numerators: np.ndarray
    denominators: np.ndarray
    config: EngineConfig
    intermediate: Optional[IntermediateStore] = None
    batches_applied: int = 0

    def __post_init__(self):
        if (self.intermediate is not None) != (self.config.mode == VANILLA):
            raise ValueError("an intermediate store is kept exactly in vanilla mode")

    @property
    def mode(self) -> str:
        return self.config.mode

    @property
    def scores(self) -> ScoreTable:
        return delta_from_counts(self.numerators, self.denominators)


@dataclass
class BatchReport:
    batch: UpdateBatch
    delta: ScoreDelta
    scores: ScoreTable
    seconds: float
    stats: JoinStats


# -- inc_infer ------------------------------------------------------------------

def _subset_tables(catalog: RuleCatalog | Sequence[CandidateRule], rule_ids: Optional[np.ndarray] = None,
                   heads: Optional[np.ndarray] = None) -> list[RuleTable]:
    rules = list(catalog)
    if rule_ids is not None:
        keep = set(rule_ids.tolist())
        rules = [r for r in rules if r.rule_id in keep]
    if heads is not None:
        keep = set(heads.tolist())
        rules = [r for r in rules if r.head in keep]
    return rule_tables(rules)


def _base_side(base: TripleStore, keys: np.ndarray, template, atom: int, preds: np.ndarray,
               config: JoinConfig):
    """Facts of ``base`` that can fill body ``atom`` with connecting entity in ``keys``."""
    sv, _ = template.atoms[atom]
    pos = base.positions_with("subject" if sv == "z" else "object", keys, term_order=True)
    facts = base.facts.take(pos)
    facts = facts.take(np.flatnonzero(member_mask(facts.p, preds)))
    return orient(facts, template, atom)


def inc_infer_into(base: TripleStore, batch: Facts, tables: Sequence[RuleTable], config: JoinConfig,
                   sink: Sink, stats: Optional[JoinStats] = None) -> None:
    """Stream every body path over ``base | batch`` that uses a batch fact."""
    if not len(batch):
        return
    for table in tables:
        t = table.template
        if t.arity == 1:
            apply_single(batch, table, sink)
            continue
        new1 = orient(batch, t, 0)
        new2 = orient(batch, t, 1)
        new1 = new1.take(np.flatnonzero(member_mask(new1.pred, table.body1)))
        new2 = new2.take(np.flatnonzero(member_mask(new2.pred, table.body2)))
        if len(new1):  # batch fact as body1, base fact as body2
            old2 = _base_side(base, np.unique(new1.key), t, 1, table.body2, config)
            join_sides(new1, old2, table, config, sink, stats)
        if len(new2):  # base fact as body1, batch fact as body2
            old1 = _base_side(base, np.unique(new2.key), t, 0, table.body1, config)
            join_sides(old1, new2, table, config, sink, stats)
        if len(new1) and len(new2):  # both body atoms from the batch
            join_sides(new1, new2, table, config, sink, stats)


def inc_infer(base: TripleStore, batch: Facts | Iterable[Sequence[int]], catalog: RuleCatalog,
              config: Optional[JoinConfig] = None) -> Predictions:
    """Multiset of new predictions (one per new body path) caused by ``batch``."""
    from .join import CollectSink

    sink = CollectSink()
    inc_infer_into(base, Facts.from_triples(batch), rule_tables(catalog.rules), config or JoinConfig(), sink)
    return sink.predictions(catalog.head_array)


# -- infer / check updates ----------------------------------------------------------

def _per_rule(rule: np.ndarray, hit: Optional[np.ndarray], n_rules: int) -> tuple[np.ndarray, np.ndarray]:
    den = np.bincount(rule, minlength=n_rules)
    num = np.bincount(rule[hit], minlength=n_rules) if hit is not None else np.zeros_like(den)
    return num, den


def _stdconf_delta(new_keys: np.ndarray, base: TripleStore, heads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rule, x, y = unpack3(new_keys)
    return _per_rule(rule, base.contains_keys(pack3(heads[rule], x, y)), heads.size)


def _distinct(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    if keys.size > 1 and not np.all(keys[1:] > keys[:-1]):
        return np.unique(keys)
    return keys


def infer_update_vanilla(delta_keys: np.ndarray, intermediate: IntermediateStore, base: TripleStore
                         ) -> tuple[tuple[np.ndarray, np.ndarray], IntermediateStore]:
    """Count predictions of ``delta_keys`` (distinct packed) not yet in ``intermediate``."""
    heads = intermediate.heads
    delta_keys = _distinct(delta_keys)
    if delta_keys.size and delta_keys.max() >> np.int64(42) >= heads.size:
        raise ConsistencyError("prediction references an unknown rule")
    new = setdiff_sorted(delta_keys, intermediate.keys)
    return _stdconf_delta(new, base, heads), intermediate.with_keys(new)


def check_update_vanilla(batch: Facts, intermediate: IntermediateStore) -> tuple[np.ndarray, np.ndarray]:
    """(1, 0) per (batch fact, rule) pair present in ``intermediate``."""
    rules = intermediate.rules_for(np.unique(batch.keys()))
    n = intermediate.heads.size
    return np.bincount(rules, minlength=n), np.zeros(n, dtype=np.int64)


def infer_update_search(delta_keys: np.ndarray, base: TripleStore, catalog: RuleCatalog, config: JoinConfig,
                        stats: Optional[JoinStats] = None) -> tuple[np.ndarray, np.ndarray]:
    """Count predictions of ``delta_keys`` that ``base`` alone cannot regenerate."""
    heads = catalog.head_array
    delta_keys = _distinct(delta_keys)
    if not delta_keys.size:
        z = np.zeros(heads.size, dtype=np.int64)
        return z, z.copy()
    rule, x, y = unpack3(delta_keys)
    seeds = Facts(heads[rule], x, y)
    known = _KeySink(delta_keys)
    search_into(seeds, base, _subset_tables(catalog, rule_ids=np.unique(rule)), config, known, stats,
                exact_pairs=True)
    new = setdiff_sorted(delta_keys, known.result())
    return _stdconf_delta(new, base, heads)


def check_update_search(batch: Facts, store: TripleStore, catalog: RuleCatalog, config: JoinConfig,
                        stats: Optional[JoinStats] = None) -> tuple[np.ndarray, np.ndarray]:
    """(1, 0) per (batch fact, rule) with at least one body path in ``store``."""
    heads = catalog.head_array
    sink = MatchSink(heads, np.unique(batch.keys()), distinct=True)
    search_into(batch, store, _subset_tables(catalog, heads=np.unique(batch.p)), config, sink, stats,
                exact_pairs=True)
    rule, _, _ = unpack3(sink.result())
    return np.bincount(rule, minlength=heads.size), np.zeros(heads.size, dtype=np.int64)


def infer_update_xconf(paths: Predictions, base: TripleStore, n_rules: int) -> tuple[np.ndarray, np.ndarray]:
    """(exists, 1) per path, head existence checked in ``base``."""
    return _per_rule(paths.rule, base.contains_keys(paths.head_keys()), n_rules)


def check_update_xconf(batch: Facts, store: TripleStore, catalog: RuleCatalog, config: JoinConfig,
                       stats: Optional[JoinStats] = None) -> tuple[np.ndarray, np.ndarray]:
    """(1, 0) per body path in ``store`` predicting a batch fact."""
    heads = catalog.head_array
    sink = MatchSink(heads, np.unique(batch.keys()), distinct=False)
    search_into(batch, store, _subset_tables(catalog, heads=np.unique(batch.p)), config, sink, stats,
                exact_pairs=True)
    _, paths = sink.result()
    return paths, np.zeros(heads.size, dtype=np.int64)


class _KeySink(Sink):
    """Distinct packed prediction keys that also occur in ``targets``."""

    def __init__(self, targets: np.ndarray):
        self.targets = targets
        self.inner = DistinctSink()

    def consume(self, rule, x, y):
        keys = pack3(rule, x, y)
        keys = keys[isin_sorted(keys, self.targets)]
        if keys.size:
            self.inner.parts.append(np.unique(keys))

    def spawn(self):
        return _KeySink(self.targets)

    def result(self):
        return self.inner.result()

    def absorb(self, result):
        self.inner.absorb(result)


# -- driver ---------------------------------------------------------------------

def _empty_state(catalog: RuleCatalog, config: EngineConfig, store: Optional[TripleStore] = None) -> EngineState:
    n = len(catalog)
    inter = IntermediateStore.empty(catalog.head_array) if config.mode == VANILLA else None
    return EngineState(store or TripleStore(), catalog, np.zeros(n, dtype=np.int64),
                       np.zeros(n, dtype=np.int64), config, inter)


def bootstrap(store: TripleStore, catalog: RuleCatalog, config: EngineConfig) -> EngineState:
    """State seeded by batch mining ``store`` (the base of an incremental run)."""
    res = mine_batch(store, catalog, config.join, config.metric, keep_intermediate=config.mode == VANILLA)
    state = _empty_state(catalog, config, store)
    for rid, (n, d) in res.scores[config.metric].items():
        state.numerators[rid] = n
        state.denominators[rid] = d
    if config.mode == VANILLA:
        state.intermediate = IntermediateStore(res.intermediate, catalog.head_array)
    return state


def apply_batch(state: EngineState, raw: Facts | Iterable[Sequence[int]]) -> BatchReport:
    """Advance ``state`` by one batch. Facts already in the store are dropped."""
    t0 = time.perf_counter()
    cfg = state.config.join
    catalog = state.catalog
    heads = catalog.head_array
    n = heads.size
    stats = JoinStats()
    base = state.store
    store, batch = apply_update(base, raw, state.batches_applied)
    tau = batch.facts
    tables = rule_tables(catalog.rules)
    mode = state.mode

    if mode == XCONF:
        paths = CountSink(heads, base.key_set)
        inc_infer_into(base, tau, tables, cfg, paths, stats)
        inf = paths.result()
    else:
        distinct = DistinctSink()
        inc_infer_into(base, tau, tables, cfg, distinct, stats)
        dkeys = distinct.result()
        if mode == VANILLA:
            inf, inter = infer_update_vanilla(dkeys, state.intermediate, base)
        else:
            inf = infer_update_search(dkeys, base, catalog, cfg, stats)

    if mode == VANILLA:
        state.intermediate = inter
        chk = check_update_vanilla(tau, inter)
    elif mode == SEARCH:
        chk = check_update_search(tau, store, catalog, cfg, stats)
    else:
        chk = check_update_xconf(tau, store, catalog, cfg, stats)

    d_num = inf[0] + chk[0]
    d_den = inf[1] + chk[1]
    num = state.numerators + d_num
    den = state.denominators + d_den
    if np.any(num > den):
        bad = int(np.flatnonzero(num > den)[0])
        raise ConsistencyError(f"rule {bad}: numerator {num[bad]} exceeds denominator {den[bad]}")
    state.numerators, state.denominators = num, den
    state.store = store
    state.batches_applied += 1
    delta = delta_from_counts(d_num, d_den)
    return BatchReport(batch, delta, state.scores, time.perf_counter() - t0, stats)


def run_incremental(batches: Iterable[Facts | Iterable[Sequence[int]]], catalog: RuleCatalog,
                    config: Optional[EngineConfig] = None, base: Optional[TripleStore] = None
                    ) -> tuple[EngineState, list[ScoreTable]]:
    """Apply ``batches`` in order; returns the final state and a score snapshot per batch.

    With ``base`` the run starts from batch-mined scores for that store,
    otherwise from an empty store.
    """
    config = config or EngineConfig()
    state = bootstrap(base, catalog, config) if base is not None else _empty_state(catalog, config)
    snapshots = []
    for b in batches:
        snapshots.append(apply_batch(state, b).scores)
    return state, snapshots

"""Timing scenarios over synthetic KBs.

Every scenario times several variants of one computation and checks that they
agree. Rows are ``scenario, variant, update_fraction_or_param, wall_ms,
output_checksum``; a checksum mismatch between variants that must agree
raises :class:`ChecksumMismatch`.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .batch import mine_batch
from .catalog import PredicateSchema, generate_candidates
from .engine import EngineConfig, apply_batch, bootstrap
from .join import CountSink, JoinConfig, search_into, rule_tables
from .metrics import XCONF, checksum
from .store import Facts, TripleStore
from .synth import GenParams, SplitSpec, generate_kb, split_indices

log = logging.getLogger(__name__)

SCENARIOS = ("join-variants", "group-size-sweep", "filter-sweep", "incremental-vs-batch")
CSV_HEADER = ("scenario", "variant", "update_fraction_or_param", "wall_ms", "output_checksum")


class ChecksumMismatch(RuntimeError):
    pass


@dataclass(frozen=True)
class BenchRow:
    scenario: str
    variant: str
    param: str
    wall_ms: float
    checksum: str

    def as_tuple(self) -> tuple:
        return (self.scenario, self.variant, self.param, f"{self.wall_ms:.1f}", self.checksum)


@dataclass
class BenchConfig:
    gen: GenParams = field(default_factory=lambda: GenParams(n_entities=400_000, n_predicates=60,
                                                             n_facts=1_000_000, seed=1))
    base_fraction: float = 0.9
    update_fraction: float = 0.1
    update_fractions: tuple[float, ...] = (0.01, 0.05, 0.1)
    split_seed: int = 0
    group_sizes: tuple[Optional[int], ...] = (1000, 5000, 10_000, 30_000, 50_000, None)
    join_strategies: tuple[str, ...] = ("adaptive", "rules", "facts")
    filter_strategies: tuple[str, ...] = ("broadcast", "join", "auto")
    mode: str = XCONF
    repeats: int = 1
    join: JoinConfig = field(default_factory=JoinConfig)


class _Fixture:
    """The generated KB and its rule catalog, built once per benchmark run."""

    def __init__(self, cfg: BenchConfig, data: Optional[tuple[PredicateSchema, Facts]] = None):
        if data is None:
            _, self.schema, self.facts = generate_kb(cfg.gen).encode()
        else:
            self.schema, self.facts = data
        self.catalog = generate_candidates(self.schema)
        self.store = TripleStore(self.facts)
        self.cfg = cfg
        log.info("fixture: %d facts, %d candidate rules", self.store.fact_count, len(self.catalog))

    def split(self, update_fraction: float):
        sp = split_indices(len(self.facts), SplitSpec(self.cfg.base_fraction, (update_fraction,), self.cfg.split_seed))
        return self.facts.take(sp.base), self.facts.take(sp.batches[0])


def _timed(fn: Callable[[], str]) -> tuple[float, str]:
    t0 = time.perf_counter()
    out = fn()
    return (time.perf_counter() - t0) * 1000.0, out


def _count_checksum(sink: CountSink) -> str:
    hits, paths = sink.result()
    h = hashlib.sha256(hits.tobytes() + paths.tobytes())
    return h.hexdigest()[:16]


def _search_counts(fx: _Fixture, small, big: TripleStore, config: JoinConfig) -> str:
    sink = CountSink(fx.catalog.head_array, big.key_set)
    search_into(small, big, rule_tables(fx.catalog.rules), config, sink)
    return _count_checksum(sink)


def _fmt(v) -> str:
    return "unlimited" if v is None else str(v)


def _check(rows: Sequence[BenchRow]) -> None:
    by_param: dict[tuple[str, str], set[str]] = {}
    for r in rows:
        key = (r.scenario, r.param) if r.scenario == "incremental-vs-batch" else (r.scenario, "")
        by_param.setdefault(key, set()).add(r.checksum)
    for key, sums in by_param.items():
        if len(sums) > 1:
            raise ChecksumMismatch(f"{key[0]}: variants disagree ({', '.join(sorted(sums))})")


def benchmark_run(scenario: str, cfg: Optional[BenchConfig] = None, fixture: Optional[_Fixture] = None
                  ) -> list[BenchRow]:
    """Run one scenario; raises :class:`ChecksumMismatch` if variants disagree."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    cfg = cfg or BenchConfig()
    fx = fixture or _Fixture(cfg)
    rows: list[BenchRow] = []
    rep = range(cfg.repeats)

    if scenario == "join-variants":
        # search of an update batch against the cumulated KB
        _, tau = fx.split(cfg.update_fraction)
        for js in cfg.join_strategies:
            jc = dataclasses.replace(cfg.join, join_strategy=js)
            for _ in rep:
                ms, cs = _timed(lambda: _search_counts(fx, tau, fx.store, jc))
                rows.append(BenchRow(scenario, js, str(cfg.update_fraction), ms, cs))
    elif scenario == "group-size-sweep":
        for m in cfg.group_sizes:
            jc = dataclasses.replace(cfg.join, max_group_size=m)
            for _ in rep:
                ms, cs = _timed(lambda: checksum(mine_batch(fx.store, fx.catalog, jc, XCONF).scores[XCONF]))
                rows.append(BenchRow(scenario, f"m={_fmt(m)}", _fmt(m), ms, cs))
    elif scenario == "filter-sweep":
        _, tau = fx.split(cfg.update_fraction)
        for fs in cfg.filter_strategies:
            jc = dataclasses.replace(cfg.join, filter_strategy=fs)
            for _ in rep:
                ms, cs = _timed(lambda: _search_counts(fx, tau, fx.store, jc))
                rows.append(BenchRow(scenario, fs, str(cfg.update_fraction), ms, cs))
    else:
        ec = EngineConfig(cfg.mode, cfg.join)
        for frac in cfg.update_fractions:
            base, tau = fx.split(frac)
            full_store = TripleStore(Facts.concat([base, tau]))
            full_store.key_set  # both sides start with their fact-key index built
            for _ in rep:
                ms, cs = _timed(lambda: checksum(mine_batch(full_store, fx.catalog, cfg.join, ec.metric).scores[ec.metric]))
                rows.append(BenchRow(scenario, "batch", str(frac), ms, cs))
            for _ in rep:
                state = bootstrap(TripleStore(base), fx.catalog, ec)
                state.store.key_set  # built when the previous batch was applied
                ms, cs = _timed(lambda: checksum(apply_batch(state, tau).scores))
                rows.append(BenchRow(scenario, f"incremental-{cfg.mode}", str(frac), ms, cs))
    _check(rows)
    return rows


def write_csv(rows: Iterable[BenchRow], out: io.TextIOBase, header: bool = True) -> None:
    w = csv.writer(out, lineterminator="\n")
    if header:
        w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(r.as_tuple())


def median_ms(rows: Iterable[BenchRow], variant: str, param: Optional[str] = None) -> float:
    vals = [r.wall_ms for r in rows if r.variant == variant and (param is None or r.param == param)]
    if not vals:
        raise KeyError(variant)
    return float(np.median(vals))

"""Search kernel: entity filtering, size-limited grouping and the adaptive group join.

Body atoms of a length-3 rule share a connecting entity ``z``. Facts that can
fill body1 are grouped by their ``z`` term into lists of ``(pred, x)``; facts
that can fill body2 into lists of ``(pred, y)``. Lists meeting on the same
``z`` are joined: either by looping over the rule set and looking up the two
predicates (rules branch), or by looping over all fact pairs and looking up
rules for the predicate pair (facts branch), whichever is smaller.

Groups longer than ``max_group_size`` are split into chunks and every chunk
pair of a key becomes an independent task, so one hub entity cannot become a
single straggler task.

The production path is vectorised over all tasks at once. The literal,
per-group formulation lives in :func:`group_join_adaptive` and
:func:`search_reference` and serves as a cross-check.
"""
from __future__ import annotations

import logging
import multiprocessing as mp
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .catalog import TEMPLATE_BY_ID, TEMPLATES, CandidateRule, RuleCatalog, ShapeTemplate
from .keys import KeySet, isin_sorted, pack2, pack3
from .store import Facts, TripleStore, _ranges

log = logging.getLogger(__name__)

DEFAULT_MAX_GROUP_SIZE = 30_000
DEFAULT_BROADCAST_THRESHOLD = 10_000_000
FILTER_STRATEGIES = ("auto", "broadcast", "join")
JOIN_STRATEGIES = ("adaptive", "rules", "facts")
SUBJECT_GROUPED = "subject-grouped"
OBJECT_GROUPED = "object-grouped"

_EMPTY = np.zeros(0, dtype=np.int64)


class ConfigError(ValueError):
    pass


def default_workers() -> int:
    env = os.environ.get("HORN_DELTA_WORKERS")
    if env:
        return max(1, int(env))
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:  # pragma: no cover - non-linux
        return os.cpu_count() or 1


@dataclass(frozen=True)
class JoinConfig:
    """Tuning knobs of the search kernel. None of them changes results."""

    max_group_size: Optional[int] = DEFAULT_MAX_GROUP_SIZE  # None: unlimited
    broadcast_threshold: int = DEFAULT_BROADCAST_THRESHOLD
    filter_strategy: str = "auto"
    join_strategy: str = "adaptive"
    workers: int = 1
    block_pairs: int = 1 << 20

    def __post_init__(self):
        if self.max_group_size is not None and self.max_group_size < 1:
            raise ConfigError(f"max group size must be >= 1, got {self.max_group_size}")
        if self.filter_strategy not in FILTER_STRATEGIES:
            raise ConfigError(f"unknown filter strategy {self.filter_strategy!r}")
        if self.join_strategy not in JOIN_STRATEGIES:
            raise ConfigError(f"unknown join strategy {self.join_strategy!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.block_pairs < 1:
            raise ConfigError("block_pairs must be >= 1")


@dataclass
class JoinStats:
    tasks_rules: int = 0
    tasks_facts: int = 0
    pair_comparisons: int = 0
    rule_iterations: int = 0
    emitted: int = 0

    def add(self, other: "JoinStats") -> None:
        self.tasks_rules += other.tasks_rules
        self.tasks_facts += other.tasks_facts
        self.pair_comparisons += other.pair_comparisons
        self.rule_iterations += other.rule_iterations
        self.emitted += other.emitted


class Prediction(NamedTuple):
    head: int
    subject: int
    object: int
    rule_id: int


class Predictions:
    """Columnar multiset of predictions, one row per body path."""

    __slots__ = ("rule", "subject", "object", "head")

    def __init__(self, rule, subject, object, head):
        self.rule = np.asarray(rule, dtype=np.int64)
        self.subject = np.asarray(subject, dtype=np.int64)
        self.object = np.asarray(object, dtype=np.int64)
        self.head = np.asarray(head, dtype=np.int64)

    @classmethod
    def empty(cls) -> "Predictions":
        return cls(_EMPTY, _EMPTY, _EMPTY, _EMPTY)

    def __len__(self) -> int:
        return int(self.rule.size)

    def __iter__(self) -> Iterator[Prediction]:
        for h, s, o, r in zip(self.head.tolist(), self.subject.tolist(),
                              self.object.tolist(), self.rule.tolist()):
            yield Prediction(h, s, o, r)

    def to_list(self) -> list[Prediction]:
        return list(self)

    def keys(self) -> np.ndarray:
        """Packed ``(rule, subject, object)``; rule determines head."""
        return pack3(self.rule, self.subject, self.object)

    def head_keys(self) -> np.ndarray:
        """Packed ``(head, subject, object)``: the predicted fact."""
        return pack3(self.head, self.subject, self.object)

    def __repr__(self) -> str:
        return f"Predictions({len(self)})"


@dataclass
class AdjacencyGroup:
    key: int
    side: str
    pairs: list[tuple[int, int]]
    chunk_index: int = 0
    chunk_count: int = 1


# -- rule tables ----------------------------------------------------------------

class RuleTable:
    """One template's rules indexed by body1 and by (body1, body2)."""

    def __init__(self, template: ShapeTemplate, rules: Sequence[CandidateRule]):
        self.template = template
        self.rules = list(rules)
        self.size = len(self.rules)
        ids = np.array([r.rule_id for r in self.rules], dtype=np.int64)
        b1 = np.array([r.body1 for r in self.rules], dtype=np.int64)
        self.body1 = np.unique(b1)
        if template.arity == 1:
            codes = b1
            self.body2 = _EMPTY
        else:
            b2 = np.array([r.body2 for r in self.rules], dtype=np.int64)
            self.body2 = np.unique(b2)
            codes = pack2(b1, b2)
        order = np.argsort(codes, kind="stable")
        self.codes, self.start, self.count = _group_bounds(codes[order])
        self.rule_ids = ids[order]
        if template.arity == 2:
            self.pair_b1 = self.codes >> np.int64(21)
            self.pair_b2 = self.codes & np.int64((1 << 21) - 1)

    def lookup(self, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """For each code: (index into self.codes, hit mask)."""
        if self.codes.size == 0:
            return np.zeros(codes.shape, dtype=np.int64), np.zeros(codes.shape, dtype=bool)
        pos = np.searchsorted(self.codes, codes)
        pos[pos == self.codes.size] = 0
        return pos, self.codes[pos] == codes

    def lookup_pairs(self, p1: np.ndarray, p2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Like :meth:`lookup` on ``(p1, p2)`` body pairs, via a dense predicate grid."""
        grid = self._grid
        if grid is None:
            return self.lookup(pack2(p1, p2))
        r1, r2, table = grid
        pos = table[r1[p1], r2[p2]]
        return pos, pos >= 0

    @cached_property
    def _grid(self):
        if self.template.arity != 2 or not self.codes.size:
            return None
        n1, n2 = self.body1.size, self.body2.size
        if n1 * n2 > (1 << 24):
            return None
        r1 = np.full(int(self.body1[-1]) + 1, n1, dtype=np.int64)
        r1[self.body1] = np.arange(n1)
        r2 = np.full(int(self.body2[-1]) + 1, n2, dtype=np.int64)
        r2[self.body2] = np.arange(n2)
        table = np.full((n1 + 1, n2 + 1), -1, dtype=np.int64)
        table[r1[self.pair_b1], r2[self.pair_b2]] = np.arange(self.codes.size)
        return r1, r2, table


def member_mask(values: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """``isin`` for small non-negative ids (predicates) through a lookup table."""
    if not allowed.size or not values.size:
        return np.zeros(values.shape, dtype=bool)
    top = int(allowed.max())
    table = np.zeros(top + 2, dtype=bool)
    table[allowed] = True
    return table[np.minimum(values, top + 1)]


def rule_tables(rules: Iterable[CandidateRule]) -> list[RuleTable]:
    by_t: dict[str, list[CandidateRule]] = defaultdict(list)
    for r in rules:
        by_t[r.template].append(r)
    return [RuleTable(t, by_t[t.id]) for t in TEMPLATES if by_t.get(t.id)]


# -- sinks ----------------------------------------------------------------------

class Sink:
    """Consumer of emitted ``(rule, x, y)`` blocks. Results merge commutatively."""

    def consume(self, rule: np.ndarray, x: np.ndarray, y: np.ndarray) -> None:
        raise NotImplementedError

    def spawn(self) -> "Sink":
        raise NotImplementedError

    def result(self):
        raise NotImplementedError

    def absorb(self, result) -> None:
        raise NotImplementedError


class CollectSink(Sink):
    def __init__(self):
        self.parts: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []

    def consume(self, rule, x, y):
        if rule.size:
            self.parts.append((rule, x, y))

    def spawn(self):
        return CollectSink()

    def result(self):
        if not self.parts:
            return _EMPTY, _EMPTY, _EMPTY
        return tuple(np.concatenate([p[i] for p in self.parts]) for i in range(3))

    def absorb(self, result):
        if result[0].size:
            self.parts.append(result)

    def predictions(self, heads: np.ndarray) -> Predictions:
        r, x, y = self.result()
        return Predictions(r, x, y, heads[r])


class CountSink(Sink):
    """Per-rule path counts and, optionally, head-existence hits."""

    def __init__(self, heads: np.ndarray, fact_keys: Optional[KeySet] = None):
        self.heads = heads
        self.fact_keys = fact_keys
        self.paths = np.zeros(heads.size, dtype=np.int64)
        self.hits = np.zeros(heads.size, dtype=np.int64)

    def consume(self, rule, x, y):
        if not rule.size:
            return
        self.paths += np.bincount(rule, minlength=self.heads.size)
        if self.fact_keys is not None:
            hit = self.fact_keys.contains(pack3(self.heads[rule], x, y))
            self.hits += np.bincount(rule[hit], minlength=self.heads.size)

    def spawn(self):
        return CountSink(self.heads, self.fact_keys)

    def result(self):
        return self.hits, self.paths

    def absorb(self, result):
        self.hits += result[0]
        self.paths += result[1]


class DistinctSink(Sink):
    """Distinct packed ``(rule, x, y)`` keys."""

    _COMPACT = 1 << 23

    def __init__(self):
        self.parts: list[np.ndarray] = []
        self.pending = 0

    def consume(self, rule, x, y):
        if not rule.size:
            return
        self.parts.append(np.unique(pack3(rule, x, y)))
        self.pending += self.parts[-1].size
        if self.pending > self._COMPACT and len(self.parts) > 1:
            self.parts = [np.unique(np.concatenate(self.parts))]
            self.pending = self.parts[0].size

    def spawn(self):
        return DistinctSink()

    def result(self) -> np.ndarray:
        if not self.parts:
            return _EMPTY
        if len(self.parts) > 1:
            self.parts = [np.unique(np.concatenate(self.parts))]
        return self.parts[0]

    def absorb(self, result):
        if result.size:
            self.parts.append(result)


class MatchSink(Sink):
    """Keeps emitted predictions whose head fact is one of ``targets``."""

    def __init__(self, heads: np.ndarray, targets: np.ndarray, distinct: bool):
        self.heads = heads
        self.targets = targets
        self.distinct = distinct
        self.inner: Sink = DistinctSink() if distinct else CountSink(heads)
        self._set = KeySet(targets)

    def consume(self, rule, x, y):
        if not rule.size:
            return
        keep = self._set.contains(pack3(self.heads[rule], x, y))
        if keep.any():
            self.inner.consume(rule[keep], x[keep], y[keep])

    def spawn(self):
        return MatchSink(self.heads, self.targets, self.distinct)

    def result(self):
        return self.inner.result()

    def absorb(self, result):
        self.inner.absorb(result)


class TeeSink(Sink):
    def __init__(self, *sinks: Sink):
        self.sinks = sinks

    def consume(self, rule, x, y):
        for s in self.sinks:
            s.consume(rule, x, y)

    def spawn(self):
        return TeeSink(*(s.spawn() for s in self.sinks))

    def result(self):
        return tuple(s.result() for s in self.sinks)

    def absorb(self, result):
        for s, r in zip(self.sinks, result):
            s.absorb(r)


# -- filtering ------------------------------------------------------------------

def filter_positions(big: TripleStore, keys, position: str, strategy: str = "auto",
                     threshold: int = DEFAULT_BROADCAST_THRESHOLD) -> np.ndarray:
    """Positions (in key order) of facts whose ``position`` term is in ``keys``."""
    keys = np.unique(np.asarray(keys, dtype=np.int64))
    if keys.size == 0 or big.fact_count == 0:
        return _EMPTY
    if strategy == "auto":
        strategy = "broadcast" if keys.size <= threshold else "join"
    if strategy == "broadcast":
        col = big.s if position == "subject" else big.o
        if position not in ("subject", "object"):
            raise ValueError(f"unknown position {position!r}")
        size = int(max(col.max(), keys.max())) + 1
        mask = np.zeros(size, dtype=bool)
        mask[keys] = True
        return np.flatnonzero(mask[col])
    if strategy == "join":
        return big.positions_with(position, keys)
    raise ConfigError(f"unknown filter strategy {strategy!r}")


def filter_relevant(big: TripleStore, keys, position: str, strategy: str = "auto",
                    threshold: int = DEFAULT_BROADCAST_THRESHOLD) -> Facts:
    """Facts of ``big`` whose term at ``position`` is in ``keys``.

    ``broadcast`` tests every fact against a shipped key set; ``join`` looks
    the keys up in the store's subject/object index. ``auto`` broadcasts when
    there are at most ``threshold`` distinct keys. All give the same facts in
    key order.
    """
    return big.facts.take(filter_positions(big, keys, position, strategy, threshold))


# -- grouping -------------------------------------------------------------------

def _group_bounds(sorted_vals: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unique values, start offsets and run lengths of a sorted array."""
    if sorted_vals.size == 0:
        return _EMPTY, _EMPTY, _EMPTY
    starts = np.flatnonzero(np.concatenate(([True], sorted_vals[1:] != sorted_vals[:-1])))
    counts = np.diff(np.append(starts, sorted_vals.size))
    return sorted_vals[starts], starts.astype(np.int64), counts.astype(np.int64)


def group_with_limit(facts: Facts | Iterable[Sequence[int]], side: str, m: Optional[int]) -> list[AdjacencyGroup]:
    """Group facts by subject or object with at most ``m`` pairs per chunk.

    Object-grouped lists hold ``(predicate, subject)`` pairs keyed by object;
    subject-grouped lists hold ``(predicate, object)`` keyed by subject.
    Pairs are ordered by (predicate, entity) within a key.
    """
    if m is not None and m < 1:
        raise ConfigError(f"max group size must be >= 1, got {m}")
    facts = Facts.from_triples(facts)
    if side == OBJECT_GROUPED:
        key, other = facts.o, facts.s
    elif side == SUBJECT_GROUPED:
        key, other = facts.s, facts.o
    else:
        raise ValueError(f"unknown side {side!r}")
    order = np.lexsort((other, facts.p, key))
    key, pred, other = key[order], facts.p[order], other[order]
    groups = []
    for k, st, n in zip(*(a.tolist() for a in _group_bounds(key))):
        size = n if m is None else m
        count = -(-n // size)
        for c in range(count):
            lo, hi = st + c * size, min(st + n, st + (c + 1) * size)
            pairs = list(zip(pred[lo:hi].tolist(), other[lo:hi].tolist()))
            groups.append(AdjacencyGroup(k, side, pairs, c, count))
    return groups


# -- literal per-group join -------------------------------------------------------

def choose_branch(n_rules: int, n1: int, n2: int) -> str:
    """``rules`` when the rule set is smaller than the pair product."""
    return "rules" if n_rules < n1 * n2 else "facts"


def group_join_adaptive(key: int, l1: Sequence[tuple[int, int]], l2: Sequence[tuple[int, int]],
                        rules: Sequence[CandidateRule], force: Optional[str] = None,
                        trace: Optional[dict] = None) -> list[Prediction]:
    """Join one matched pair of lists sharing connecting entity ``key``.

    ``l1`` holds ``(body1 predicate, x)``, ``l2`` holds ``(body2 predicate, y)``.
    Emits ``(head, x, y, rule_id)`` once per (pair, rule) match, duplicates kept.
    """
    branch = force or choose_branch(len(rules), len(l1), len(l2))
    out: list[Prediction] = []
    work = 0
    if branch == "rules":
        preds1: dict[int, list[int]] = defaultdict(list)
        preds2: dict[int, list[int]] = defaultdict(list)
        for p, e in l1:
            preds1[p].append(e)
        for p, e in l2:
            preds2[p].append(e)
        for r in rules:
            work += 1
            for sub1 in preds1.get(r.body1, ()):
                for sub2 in preds2.get(r.body2, ()):
                    out.append(Prediction(r.head, sub1, sub2, r.rule_id))
    elif branch == "facts":
        by_pair: dict[tuple[int, int], list[CandidateRule]] = defaultdict(list)
        for r in rules:
            by_pair[(r.body1, r.body2)].append(r)
        for p1, sub1 in l1:
            for p2, sub2 in l2:
                work += 1
                for r in by_pair.get((p1, p2), ()):
                    out.append(Prediction(r.head, sub1, sub2, r.rule_id))
    else:
        raise ConfigError(f"unknown branch {branch!r}")
    if trace is not None:
        trace["branch"] = branch
        trace["work"] = work
        trace["key"] = key
    return out


def _template_sides(template: ShapeTemplate) -> tuple[str, str]:
    """Grouping side of the body1 and body2 facts (by where ``z`` sits)."""
    s1 = OBJECT_GROUPED if template.x_first else SUBJECT_GROUPED
    s2 = SUBJECT_GROUPED if template.y_last else OBJECT_GROUPED
    return s1, s2


def x_position(template: ShapeTemplate) -> str:
    return "subject" if template.x_first else "object"


def y_position(template: ShapeTemplate) -> str:
    if template.arity == 1:
        return "object" if template.x_first else "subject"
    return "object" if template.y_last else "subject"


def search_reference(small: Facts, big: TripleStore, catalog: RuleCatalog | Sequence[CandidateRule],
                     m: Optional[int] = DEFAULT_MAX_GROUP_SIZE, force: Optional[str] = None) -> list[Prediction]:
    """Per-group search in plain Python: filter, group with limit, join chunk pairs."""
    small = Facts.from_triples(small)
    rules = list(catalog)
    subs, objs = np.unique(small.s), np.unique(small.o)
    out: list[Prediction] = []
    for table in rule_tables(rules):
        t = table.template
        fx = filter_relevant(big, subs, x_position(t))
        fy = filter_relevant(big, objs, y_position(t))
        if t.arity == 1:
            cand = filter_relevant(TripleStore(fx), objs, y_position(t))
            for p, s, o in cand:
                x, y = (s, o) if t.x_first else (o, s)
                for r in table.rules:
                    if r.body1 == p:
                        out.append(Prediction(r.head, x, y, r.rule_id))
            continue
        side1, side2 = _template_sides(t)
        g1: dict[int, list[AdjacencyGroup]] = defaultdict(list)
        for g in group_with_limit(fx, side1, m):
            g1[g.key].append(g)
        for g in group_with_limit(fy, side2, m):
            for h in g1.get(g.key, ()):
                out.extend(group_join_adaptive(g.key, h.pairs, g.pairs, table.rules, force))
    return out


# -- vectorised join ------------------------------------------------------------

@dataclass
class Side:
    """Candidate facts for one body position: predicate, free variable, join key ``z``."""

    pred: np.ndarray
    other: np.ndarray
    key: np.ndarray

    def take(self, idx) -> "Side":
        return Side(self.pred[idx], self.other[idx], self.key[idx])

    def __len__(self) -> int:
        return int(self.pred.size)


def orient(facts: Facts, template: ShapeTemplate, atom: int) -> Side:
    """View facts as fillers of body atom ``atom`` (0 or 1) of ``template``."""
    sv, _ = template.atoms[atom]
    if sv == "z":
        return Side(facts.p, facts.o, facts.s)
    return Side(facts.p, facts.s, facts.o)


@dataclass
class _Job:
    left: Side
    right: Side
    table: RuleTable
    L0: np.ndarray
    a: np.ndarray
    R0: np.ndarray
    b: np.ndarray
    rules_branch: np.ndarray
    parts: list[np.ndarray]
    sink: Sink
    block_pairs: int
    pairs: Optional[KeySet] = None


_ACTIVE_JOB: Optional[_Job] = None


def _run_part(i: int):
    job = _ACTIVE_JOB
    assert job is not None
    sink = job.sink.spawn()
    stats = _execute(job, job.parts[i], sink)
    return sink.result(), stats


def join_sides(left: Side, right: Side, table: RuleTable, config: JoinConfig, sink: Sink,
               stats: Optional[JoinStats] = None, pairs: Optional[KeySet] = None) -> None:
    """Emit every (rule, x, y) from body1 facts ``left`` and body2 facts ``right``.

    With ``pairs`` (packed ``(x, y)``), only paths whose endpoints form one of
    those pairs are emitted; callers use it when they intersect the output
    with a known fact set anyway.
    """
    if table.size == 0:
        return
    left = left.take(np.flatnonzero(member_mask(left.pred, table.body1)))
    right = right.take(np.flatnonzero(member_mask(right.pred, table.body2)))
    if not len(left) or not len(right):
        return
    left = _sorted_by_key(left)
    right = _sorted_by_key(right)
    k1, s1, n1 = _group_bounds(left.key)
    k2, s2, n2 = _group_bounds(right.key)
    _, i1, i2 = np.intersect1d(k1, k2, assume_unique=True, return_indices=True)
    if not i1.size:
        return
    L0, a, R0, b = _make_tasks(s1[i1], n1[i1], s2[i2], n2[i2], config.max_group_size)
    if config.join_strategy == "adaptive":
        rules_branch = table.size < a * b
    else:
        rules_branch = np.full(a.size, config.join_strategy == "rules")
    cost = np.where(rules_branch, table.size + a + b, a * b)
    parts = _partition(cost, config.workers)
    job = _Job(left, right, table, L0, a, R0, b, rules_branch, parts, sink, config.block_pairs, pairs)
    local = JoinStats()
    if len(parts) == 1:
        local.add(_execute(job, parts[0], sink))
    else:
        global _ACTIVE_JOB
        _ACTIVE_JOB = job
        try:
            ctx = mp.get_context("fork")
            with ProcessPoolExecutor(max_workers=len(parts), mp_context=ctx) as pool:
                for res, st in pool.map(_run_part, range(len(parts))):
                    sink.absorb(res)
                    local.add(st)
        finally:
            _ACTIVE_JOB = None
    if stats is not None:
        stats.add(local)


def _sorted_by_key(side: Side) -> Side:
    k = side.key
    if k.size < 2 or np.all(k[1:] >= k[:-1]):
        return side
    return side.take(np.argsort(k))


def _make_tasks(s1, n1, s2, n2, m: Optional[int]):
    """Expand matched groups into chunk-pair tasks (Cartesian over chunk indices)."""
    if m is None:
        return s1, n1, s2, n2
    c1 = -(-n1 // m)
    c2 = -(-n2 // m)
    per = c1 * c2
    if np.all(per == 1):
        return s1, n1, s2, n2
    k = np.repeat(np.arange(per.size), per)
    t = np.arange(int(per.sum()), dtype=np.int64) - np.repeat(np.cumsum(per) - per, per)
    i = t // c2[k]
    j = t % c2[k]
    L0 = s1[k] + i * m
    R0 = s2[k] + j * m
    a = np.minimum(m, n1[k] - i * m)
    b = np.minimum(m, n2[k] - j * m)
    return L0, a, R0, b


def _partition(cost: np.ndarray, workers: int) -> list[np.ndarray]:
    """Split task indices into contiguous runs of roughly equal total cost."""
    n = cost.size
    if workers <= 1 or n <= 1:
        return [np.arange(n)]
    cum = np.cumsum(cost, dtype=np.float64)
    bounds = np.searchsorted(cum, cum[-1] * np.arange(1, workers) / workers, side="right")
    edges = np.unique(np.concatenate(([0], bounds, [n])))
    return [np.arange(lo, hi) for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo]


def _execute(job: _Job, idx: np.ndarray, sink: Sink) -> JoinStats:
    stats = JoinStats()
    rb = job.rules_branch[idx]
    f_idx, r_idx = idx[~rb], idx[rb]
    if f_idx.size:
        stats.tasks_facts += int(f_idx.size)
        stats.pair_comparisons += int((job.a[f_idx] * job.b[f_idx]).sum())
        stats.emitted += _facts_branch(job, job.L0[f_idx], job.a[f_idx], job.R0[f_idx], job.b[f_idx], sink)
    if r_idx.size:
        stats.tasks_rules += int(r_idx.size)
        stats.rule_iterations += int(r_idx.size) * job.table.size
        stats.emitted += _rules_branch(job, job.L0[r_idx], job.a[r_idx], job.R0[r_idx], job.b[r_idx], sink)
    return stats


def _expand_pairs(L0, a, R0, b) -> tuple[np.ndarray, np.ndarray]:
    """Row indices of the Cartesian product of ranges [L0, L0+a) x [R0, R0+b) per entry."""
    lrows = _ranges(L0, L0 + a)
    bb = np.repeat(b, a)
    rr0 = np.repeat(R0, a)
    return np.repeat(lrows, bb), _ranges(rr0, rr0 + bb)


def _blocks(L0, a, R0, b, payload, budget: int):
    """Slices of range-pair entries holding about ``budget`` pairs each.

    Entries larger than the budget are first split into left sub-ranges.
    """
    big = a * b > budget
    if big.any():
        rows = np.maximum(1, budget // b[big])
        nsub = -(-a[big] // rows)
        k = np.repeat(np.arange(nsub.size), nsub)
        off = (np.arange(int(nsub.sum())) - np.repeat(np.cumsum(nsub) - nsub, nsub)) * rows[k]
        L0 = np.concatenate([L0[~big], L0[big][k] + off])
        a = np.concatenate([a[~big], np.minimum(rows[k], a[big][k] - off)])
        R0 = np.concatenate([R0[~big], R0[big][k]])
        b = np.concatenate([b[~big], b[big][k]])
        payload = np.concatenate([payload[~big], payload[big][k]])
    cost = a * b
    if not cost.size:
        return
    block = (np.cumsum(cost) - cost) // budget
    bounds = np.concatenate(([0], np.flatnonzero(np.diff(block)) + 1, [cost.size]))
    for lo, hi in zip(bounds[:-1].tolist(), bounds[1:].tolist()):
        yield L0[lo:hi], a[lo:hi], R0[lo:hi], b[lo:hi], payload[lo:hi]


def _emit(table: RuleTable, pos: np.ndarray, x: np.ndarray, y: np.ndarray, sink: Sink) -> int:
    """Emit one row per rule sharing each matched body pair ``pos``."""
    if not pos.size:
        return 0
    cnt = table.count[pos]
    if np.all(cnt == 1):
        rules = table.rule_ids[table.start[pos]]
    else:
        rules = table.rule_ids[_ranges(table.start[pos], table.start[pos] + cnt)]
        x, y = np.repeat(x, cnt), np.repeat(y, cnt)
    sink.consume(rules, x, y)
    return int(rules.size)


def _facts_branch(job: _Job, L0, a, R0, b, sink: Sink) -> int:
    """Every (body1 fact, body2 fact) pair of a task, then rule lookup by predicate pair."""
    left, right, table = job.left, job.right, job.table
    emitted = 0
    for bl0, ba, br0, bb, _ in _blocks(L0, a, R0, b, np.zeros(L0.size, dtype=np.int64), job.block_pairs):
        li, ri = _expand_pairs(bl0, ba, br0, bb)
        if job.pairs is not None:
            keep = np.flatnonzero(job.pairs.contains(pack2(left.other[li], right.other[ri])))
            li, ri = li[keep], ri[keep]
        pos, hit = table.lookup_pairs(left.pred[li], right.pred[ri])
        li, ri, pos = li[hit], ri[hit], pos[hit]
        emitted += _emit(table, pos, left.other[li], right.other[ri], sink)
    return emitted


def _by_task_pred(side: Side, starts, counts):
    """Task rows sorted by (task, predicate): group bounds plus the free terms."""
    rows = _ranges(starts, starts + counts)
    key = pack2(np.repeat(np.arange(starts.size, dtype=np.int64), counts), side.pred[rows])
    order = np.argsort(key)
    u, st, n = _group_bounds(key[order])
    return u, st, n, side.other[rows[order]]


def _rules_branch(job: _Job, L0, a, R0, b, sink: Sink) -> int:
    """Per task, probe both lists with every body pair of the rule table."""
    table = job.table
    lu, ls, ln, lx = _by_task_pred(job.left, L0, a)
    ru, rs, rn, ry = _by_task_pred(job.right, R0, b)
    n_pairs = table.codes.size
    step = max(1, job.block_pairs // max(n_pairs, 1))
    found: list[tuple[np.ndarray, ...]] = []
    for t0 in range(0, L0.size, step):
        tasks = np.arange(t0, min(L0.size, t0 + step), dtype=np.int64)
        tt = np.repeat(tasks, n_pairs)
        pc = np.tile(np.arange(n_pairs, dtype=np.int64), tasks.size)
        i1, h1 = _lookup_sorted(lu, pack2(tt, table.pair_b1[pc]))
        tt, pc, i1 = tt[h1], pc[h1], i1[h1]
        i2, h2 = _lookup_sorted(ru, pack2(tt, table.pair_b2[pc]))
        if h2.any():
            found.append((ls[i1[h2]], ln[i1[h2]], rs[i2[h2]], rn[i2[h2]], pc[h2]))
    if not found:
        return 0
    cols = [np.concatenate([f[i] for f in found]) for i in range(5)]
    emitted = 0
    for bl0, ba, br0, bb, bp in _blocks(*cols, job.block_pairs):
        li, ri = _expand_pairs(bl0, ba, br0, bb)
        pos = np.repeat(bp, ba * bb)
        x, y = lx[li], ry[ri]
        if job.pairs is not None:
            keep = np.flatnonzero(job.pairs.contains(pack2(x, y)))
            pos, x, y = pos[keep], x[keep], y[keep]
        emitted += _emit(table, pos, x, y, sink)
    return emitted


def _lookup_sorted(sorted_vals: np.ndarray, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if sorted_vals.size == 0:
        return np.zeros(queries.shape, dtype=np.int64), np.zeros(queries.shape, dtype=bool)
    pos = np.searchsorted(sorted_vals, queries)
    pos[pos == sorted_vals.size] = 0
    return pos, sorted_vals[pos] == queries


# -- single-atom rules ----------------------------------------------------------

def apply_single(facts: Facts, table: RuleTable, sink: Sink) -> None:
    """Emit predictions of length-2 rules whose body atom is one of ``facts``."""
    if table.size == 0 or not len(facts):
        return
    pos, hit = table.lookup(facts.p)
    idx = np.flatnonzero(hit)
    if not idx.size:
        return
    pos = pos[idx]
    cnt = table.count[pos]
    rules = table.rule_ids[_ranges(table.start[pos], table.start[pos] + cnt)]
    xs, ys = (facts.s, facts.o) if table.template.x_first else (facts.o, facts.s)
    sink.consume(rules, np.repeat(xs[idx], cnt), np.repeat(ys[idx], cnt))


# -- search ---------------------------------------------------------------------

def search_into(small: Facts, big: TripleStore, rules: Iterable[CandidateRule] | Sequence[RuleTable],
                config: JoinConfig, sink: Sink, stats: Optional[JoinStats] = None,
                exact_pairs: bool = False) -> None:
    """Stream predictions derivable from ``big`` with subject in subjects(small)
    and object in objects(small) into ``sink``.

    ``exact_pairs`` narrows this to predictions whose (subject, object) is the
    (subject, object) of some fact of ``small``.
    """
    rules = list(rules)
    tables = rules if rules and isinstance(rules[0], RuleTable) else rule_tables(rules)
    if not len(small) or big.fact_count == 0:
        return
    subs, objs = np.unique(small.s), np.unique(small.o)
    pairs = KeySet(np.unique(pack2(small.s, small.o))) if exact_pairs else None
    for table in tables:
        if table.size == 0:
            continue
        t = table.template
        px = filter_positions(big, subs, x_position(t), config.filter_strategy, config.broadcast_threshold)
        if t.arity == 1:
            cand = big.facts.take(px)
            ycol = cand.column(y_position(t))
            keep = isin_sorted(ycol, objs)
            if pairs is not None:
                xs, ys = (cand.s, cand.o) if t.x_first else (cand.o, cand.s)
                keep &= pairs.contains(pack2(xs, ys))
            apply_single(cand.take(np.flatnonzero(keep)), table, sink)
            continue
        py = filter_positions(big, objs, y_position(t), config.filter_strategy, config.broadcast_threshold)
        f1 = big.facts.take(px)
        f2 = big.facts.take(py)
        join_sides(orient(f1, t, 0), orient(f2, t, 1), table, config, sink, stats, pairs)


def search(small: Facts | Iterable[Sequence[int]], big: TripleStore, catalog: RuleCatalog | Sequence[CandidateRule],
           m: Optional[int] = DEFAULT_MAX_GROUP_SIZE, filter_strategy: str = "auto",
           config: Optional[JoinConfig] = None) -> Predictions:
    """Multiset of predictions from ``big`` restricted to the entities of ``small``."""
    small = Facts.from_triples(small)
    if config is None:
        config = JoinConfig(max_group_size=m, filter_strategy=filter_strategy)
    rules = list(catalog)
    sink = CollectSink()
    search_into(small, big, rules, config, sink)
    heads = _head_lookup(rules)
    r, x, y = sink.result()
    return Predictions(r, x, y, heads[r] if r.size else _EMPTY)


def _head_lookup(rules: Sequence[CandidateRule]) -> np.ndarray:
    n = max((r.rule_id for r in rules), default=-1) + 1
    heads = np.full(n, -1, dtype=np.int64)
    for r in rules:
        heads[r.rule_id] = r.head
    return heads

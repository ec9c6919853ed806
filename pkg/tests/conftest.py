"""Shared fixtures: the small worked KB, an independent path oracle, KB strategies."""
from __future__ import annotations

from collections import Counter, defaultdict

import numpy as np
import pytest
from hypothesis import strategies as st

from horndelta.catalog import TEMPLATE_BY_ID, CandidateRule, PredicateSchema, RuleCatalog, generate_candidates, index_catalog, parse_schema
from horndelta.store import Dictionary, Facts, TripleStore, ingest_triples

KB0_ROWS = [
    "alice\tliveIn\tNYC",
    "carol\tliveIn\tNYC",
    "alice\tliveIn\tUSA",
    "NYC\tisLocatedIn\tUSA",
]
BROOKLYN_ROWS = ["alice\tliveIn\tBrooklyn", "Brooklyn\tisLocatedIn\tUSA"]
SCHEMA_ROWS = ["liveIn\tPerson\tPlace", "isLocatedIn\tPlace\tPlace"]


class World:
    """One dictionary shared by a schema and any number of fact lists."""

    def __init__(self, schema_rows=SCHEMA_ROWS):
        self.d = Dictionary()
        self.schema = parse_schema(schema_rows, self.d)

    def facts(self, rows) -> Facts:
        _, f = ingest_triples(rows, self.d)
        return f

    def store(self, rows) -> TripleStore:
        return TripleStore(self.facts(rows))

    def id(self, term: str) -> int:
        return self.d.intern(term)

    def fact(self, s, p, o) -> tuple[int, int, int]:
        return (self.id(p), self.id(s), self.id(o))

    def rule(self, template, head, b1, b2=None, rule_id=0) -> CandidateRule:
        return CandidateRule(rule_id, template, self.id(head), self.id(b1), None if b2 is None else self.id(b2))

    def catalog(self, *rules) -> RuleCatalog:
        return index_catalog(RuleCatalog([r._replace(rule_id=i) for i, r in enumerate(rules)]))

    @property
    def r1(self) -> CandidateRule:
        return self.rule("L3-xz-zy", "liveIn", "liveIn", "isLocatedIn")


@pytest.fixture
def world() -> World:
    return World()


def find_rule(catalog: RuleCatalog, template: str, head: int, b1: int, b2=None) -> int:
    for r in catalog:
        if (r.template, r.head, r.body1, r.body2) == (template, head, b1, b2):
            return r.rule_id
    raise KeyError((template, head, b1, b2))


# -- independent oracle --------------------------------------------------------
# Enumerates variable bindings atom by atom straight from the template's
# variable pattern; shares nothing with the vectorised code paths.

def oracle_paths(triples, rule: CandidateRule) -> list[tuple[int, int]]:
    """One (x, y) per body instantiation of ``rule`` over ``triples``."""
    atoms = TEMPLATE_BY_ID[rule.template].atoms
    preds = [rule.body1, rule.body2][: len(atoms)]
    by_pred = defaultdict(list)
    for p, s, o in set(map(tuple, triples)):
        by_pred[p].append((s, o))
    bindings = [{}]
    for (va, vb), p in zip(atoms, preds):
        nxt = []
        for b in bindings:
            for s, o in by_pred.get(p, ()):
                if b.get(va, s) != s or b.get(vb, o) != o:
                    continue
                if va == vb and s != o:
                    continue
                nb = dict(b)
                nb[va], nb[vb] = s, o
                nxt.append(nb)
        bindings = nxt
    return [(b["x"], b["y"]) for b in bindings]


def oracle_scores(triples, catalog) -> dict[str, dict[int, tuple[int, int]]]:
    kb = set(map(tuple, triples))
    out = {"stdconf": {}, "xconf": {}}
    for r in catalog:
        paths = oracle_paths(kb, r)
        if not paths:
            continue
        hit = [(r.head, x, y) in kb for x, y in paths]
        out["xconf"][r.rule_id] = (sum(hit), len(paths))
        distinct = set(paths)
        out["stdconf"][r.rule_id] = (sum((r.head, x, y) in kb for x, y in distinct), len(distinct))
    return out


def oracle_predictions(triples, catalog) -> Counter:
    """Multiset of (head, x, y, rule_id) over all body paths."""
    c = Counter()
    for r in catalog:
        for x, y in oracle_paths(triples, r):
            c[(r.head, x, y, r.rule_id)] += 1
    return c


# -- random KBs ----------------------------------------------------------------

def random_kb(rng: np.random.Generator, max_facts=200, max_preds=6, max_types=3, max_entities=25,
              sparse: bool = False):
    """(schema, catalog, facts) with type-respecting facts, ids packed predicates-first.

    ``sparse`` ties the entity count to the fact count (2 to 8 facts per
    entity) so large KBs keep realistic path counts.
    """
    n_pred = int(rng.integers(1, max_preds + 1))
    n_types = int(rng.integers(1, max_types + 1))
    if sparse:
        n = int(rng.integers(0, max_facts + 1))
        n_ent = int(rng.integers(max(n_types, n // 8), max(n_types, n // 2) + 1))
    else:
        n_ent = int(rng.integers(n_types, max_entities + 1))
    schema = PredicateSchema()
    types = [(int(rng.integers(n_types)), int(rng.integers(n_types))) for _ in range(n_pred)]
    for p, (a, b) in enumerate(types):
        schema.add(p, a, b)
    ent_type = np.arange(n_ent) % n_types
    pools = [n_pred + np.flatnonzero(ent_type == t) for t in range(n_types)]
    if not sparse:
        n = int(rng.integers(0, max_facts + 1))
    rows = []
    for _ in range(n):
        p = int(rng.integers(n_pred))
        a, b = types[p]
        rows.append((p, int(rng.choice(pools[a])), int(rng.choice(pools[b]))))
    return schema, generate_candidates(schema), rows


@st.composite
def kbs(draw, max_facts=60, max_preds=4, max_entities=8):
    """Hypothesis strategy for small KBs: (catalog, facts as (p, s, o) tuples)."""
    n_pred = draw(st.integers(1, max_preds))
    n_types = draw(st.integers(1, 2))
    n_ent = draw(st.integers(n_types, max_entities))
    types = [(draw(st.integers(0, n_types - 1)), draw(st.integers(0, n_types - 1))) for _ in range(n_pred)]
    schema = PredicateSchema()
    for p, (a, b) in enumerate(types):
        schema.add(p, a, b)
    pools = [[n_pred + e for e in range(n_ent) if e % n_types == t] for t in range(n_types)]
    fact = st.integers(0, n_pred - 1).flatmap(
        lambda p: st.tuples(st.just(p), st.sampled_from(pools[types[p][0]]), st.sampled_from(pools[types[p][1]])))
    facts = draw(st.lists(fact, max_size=max_facts))
    return generate_candidates(schema), facts


# -- acceptance report -----------------------------------------------------------

ACCEPTANCE: list[str] = []


def record_criterion(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)

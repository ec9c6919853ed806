import itertools

import pytest
from hypothesis import given, strategies as st

from horndelta.catalog import (
    TEMPLATES,
    CandidateRule,
    PredicateSchema,
    RuleCatalog,
    SchemaError,
    describe_rule,
    enumerate_candidates,
    format_candidates,
    generate_candidates,
    index_catalog,
    is_closed,
    is_connected,
    missing_predicates,
    parse_schema,
)
from horndelta.store import Dictionary

from conftest import SCHEMA_ROWS, World


def rows(catalog):
    return {(r.template, r.head, r.body1, r.body2) for r in catalog}


def test_six_templates_all_closed_and_connected():
    assert [t.id for t in TEMPLATES] == ["L2-xy", "L2-yx", "L3-xz-zy", "L3-zx-zy", "L3-xz-yz", "L3-zx-yz"]
    assert all(is_closed(t) and is_connected(t) for t in TEMPLATES)


def test_parse_schema_two_entries():
    assert len(parse_schema(SCHEMA_ROWS, Dictionary())) == 2


def test_parse_schema_consistent_duplicate():
    assert len(parse_schema(["liveIn\tPerson\tPlace"] * 2, Dictionary())) == 1


def test_parse_schema_conflict():
    with pytest.raises(SchemaError):
        parse_schema(["liveIn\tPerson\tPlace", "liveIn\tPerson\tCity"], Dictionary())


def test_generate_contains_typed_chain(world):
    cat = generate_candidates(world.schema, 3)
    live, loc = world.id("liveIn"), world.id("isLocatedIn")
    assert ("L3-xz-zy", live, live, loc) in rows(cat)
    # head domain Place cannot take x of type Person
    assert ("L3-xz-zy", loc, live, live) not in rows(cat)


def test_single_predicate_length_two():
    s = PredicateSchema()
    s.add(0, 0, 0)
    assert rows(generate_candidates(s, 2)) == {("L2-yx", 0, 0, None)}


def test_empty_schema_and_bad_length():
    assert len(generate_candidates(PredicateSchema(), 3)) == 0
    with pytest.raises(SchemaError):
        generate_candidates(PredicateSchema(), 4)


schemas = st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=0, max_size=6)


def _schema(types):
    s = PredicateSchema()
    for p, (a, b) in enumerate(types):
        s.add(p, a, b)
    return s


@given(schemas, st.sampled_from([2, 3]))
def test_path_finding_equals_direct_enumeration(types, max_len):
    s = _schema(types)
    cat = generate_candidates(s, max_len)
    assert rows(cat) == set(enumerate_candidates(s, max_len))
    assert [r.rule_id for r in cat] == list(range(len(cat)))


@given(schemas)
def test_every_candidate_binds_each_variable_to_one_type(types):
    s = _schema(types)
    for r in generate_candidates(s):
        t = next(t for t in TEMPLATES if t.id == r.template)
        preds = [r.body1, r.body2][: t.arity]
        seen = {"x": s.entries[r.head][0], "y": s.entries[r.head][1]}
        for (a, b), p in zip(t.atoms, preds):
            assert seen.setdefault(a, s.entries[p][0]) == s.entries[p][0]
            assert seen.setdefault(b, s.entries[p][1]) == s.entries[p][1]


def test_index_single_rule():
    r = CandidateRule(0, "L3-xz-zy", 9, 1, 2)
    cat = index_catalog(RuleCatalog([r]))
    assert cat.by_body1[1] == [r] and cat.by_body_pair[(1, 2)] == [r] and cat.by_head[9] == [r]


def test_index_empty_and_shared_body1():
    cat = index_catalog(RuleCatalog([]))
    assert cat.by_body1 == {} and cat.by_body_pair == {} and cat.by_head == {}
    a, b = CandidateRule(0, "L3-xz-zy", 9, 1, 2), CandidateRule(1, "L3-xz-yz", 9, 1, 3)
    assert len(index_catalog(RuleCatalog([a, b])).by_body1[1]) == 2


def test_format_and_describe(world):
    cat = generate_candidates(world.schema)
    lines = list(format_candidates(cat, world.d))
    assert lines[0] == "rule_id\ttemplate\thead\tbody1\tbody2\n"
    assert len(lines) == len(cat) + 1
    assert describe_rule(world.r1, world.d) == "liveIn(x,z) ∧ isLocatedIn(z,y) → liveIn(x,y)"


def test_missing_predicates(world):
    assert missing_predicates(world.schema, [world.id("liveIn"), 99]) == [99]

"""Predicate schema parsing and candidate rule generation.

Rules have head ``h(x, y)`` and one or two body atoms. Each structural
equivalence class (same variable pattern, different predicates) is a
:class:`ShapeTemplate`; a :class:`CandidateRule` is one row of that class's
fixed-column table.
"""
from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Optional

import numpy as np

from .keys import check_capacity
from .store import Dictionary, ParseError, Source, _lines


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeTemplate:
    """Variable pattern of a rule body; the head is always ``h(x, y)``.

    ``atoms`` lists (subject-variable, object-variable) per body atom.
    """

    id: str
    atoms: tuple[tuple[str, str], ...]

    @property
    def arity(self) -> int:
        return len(self.atoms)

    @property
    def x_first(self) -> bool:
        """Body1 holds ``x`` in subject position (``b1(x, z)`` / ``b1(x, y)``)."""
        return self.atoms[0][0] == "x"

    @property
    def y_last(self) -> bool:
        """Body2 holds ``y`` in object position (``b2(z, y)``)."""
        return self.atoms[-1][1] == "y"

    def __str__(self) -> str:
        return self.id


L2_XY = ShapeTemplate("L2-xy", (("x", "y"),))
L2_YX = ShapeTemplate("L2-yx", (("y", "x"),))
L3_XZ_ZY = ShapeTemplate("L3-xz-zy", (("x", "z"), ("z", "y")))
L3_ZX_ZY = ShapeTemplate("L3-zx-zy", (("z", "x"), ("z", "y")))
L3_XZ_YZ = ShapeTemplate("L3-xz-yz", (("x", "z"), ("y", "z")))
L3_ZX_YZ = ShapeTemplate("L3-zx-yz", (("z", "x"), ("y", "z")))

TEMPLATES: tuple[ShapeTemplate, ...] = (L2_XY, L2_YX, L3_XZ_ZY, L3_ZX_ZY, L3_XZ_YZ, L3_ZX_YZ)
TEMPLATE_BY_ID = {t.id: t for t in TEMPLATES}
TEMPLATE_INDEX = {t.id: i for i, t in enumerate(TEMPLATES)}


def is_closed(template: ShapeTemplate) -> bool:
    counts: dict[str, int] = defaultdict(int)
    for atom in template.atoms + (("x", "y"),):
        for v in atom:
            counts[v] += 1
    return all(c >= 2 for c in counts.values())


def is_connected(template: ShapeTemplate) -> bool:
    atoms = [set(a) for a in template.atoms + (("x", "y"),)]
    reached = set(atoms.pop())
    while atoms:
        linked = [a for a in atoms if a & reached]
        if not linked:
            return False
        for a in linked:
            reached |= a
            atoms.remove(a)
    return True


@dataclass
class PredicateSchema:
    """Maps predicate term-id to (domain type-id, range type-id)."""

    entries: dict[int, tuple[int, int]] = field(default_factory=dict)
    types: Dictionary = field(default_factory=Dictionary)

    def add(self, pred: int, domain: int, range_: int) -> None:
        prev = self.entries.get(pred)
        if prev is not None and prev != (domain, range_):
            raise SchemaError(f"conflicting types for predicate id {pred}")
        self.entries[pred] = (domain, range_)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, pred: object) -> bool:
        return pred in self.entries


def parse_schema(source: Source, dictionary: Dictionary) -> PredicateSchema:
    """Read ``predicate<TAB>domain<TAB>range`` rows.

    Predicate names are interned into ``dictionary`` (the KB's term space);
    type names get their own id space in ``schema.types``.
    """
    schema = PredicateSchema()
    for lineno, raw in enumerate(_lines(source), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3 or not all(fields):
            raise ParseError("expected 3 tab-separated fields (predicate/domain/range)", lineno)
        pred, dom, rng = fields
        try:
            schema.add(dictionary.intern(pred), schema.types.intern(dom), schema.types.intern(rng))
        except SchemaError:
            raise SchemaError(f"line {lineno}: conflicting types for predicate {pred!r}") from None
    return schema


class CandidateRule(NamedTuple):
    rule_id: int
    template: str
    head: int
    body1: int
    body2: Optional[int]


@dataclass
class RuleCatalog:
    rules: list[CandidateRule]
    by_body1: dict[int, list[CandidateRule]] = field(default_factory=dict)
    by_body2: dict[int, list[CandidateRule]] = field(default_factory=dict)
    by_body_pair: dict[tuple[int, int], list[CandidateRule]] = field(default_factory=dict)
    by_head: dict[int, list[CandidateRule]] = field(default_factory=dict)
    by_template: dict[str, list[CandidateRule]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rules)

    def __iter__(self) -> Iterator[CandidateRule]:
        return iter(self.rules)

    def __getitem__(self, rule_id: int) -> CandidateRule:
        return self.rules[rule_id]

    @property
    def head_array(self) -> np.ndarray:
        return np.fromiter((r.head for r in self.rules), dtype=np.int64, count=len(self.rules))

    @property
    def predicates(self) -> set[int]:
        out: set[int] = set()
        for r in self.rules:
            out.add(r.head)
            out.add(r.body1)
            if r.body2 is not None:
                out.add(r.body2)
        return out


def _rule_sort_key(t: tuple[str, int, int, Optional[int]]):
    return (TEMPLATE_INDEX[t[0]], t[1], t[2], -1 if t[3] is None else t[3])


def _type_compatible(
    template: ShapeTemplate, head: tuple[int, int], b1: tuple[int, int], b2: Optional[tuple[int, int]]
) -> bool:
    binding = {"x": head[0], "y": head[1]}
    for (sv, ov), (dom, rng) in zip(template.atoms, (b1, b2)):
        for var, typ in ((sv, dom), (ov, rng)):
            if binding.setdefault(var, typ) != typ:
                return False
    return True


def enumerate_candidates(schema: PredicateSchema, max_len: int) -> list[tuple[str, int, int, Optional[int]]]:
    """Every type-compatible (template, head, body1, body2), by direct enumeration."""
    if max_len not in (2, 3):
        raise SchemaError(f"max_len must be 2 or 3, got {max_len}")
    preds = sorted(schema.entries)
    ent = schema.entries
    out = []
    for t in TEMPLATES:
        if t.arity + 1 > max_len:
            continue
        if t.arity == 1:
            for h, b1 in itertools.product(preds, preds):
                if t is L2_XY and h == b1:
                    continue
                if _type_compatible(t, ent[h], ent[b1], None):
                    out.append((t.id, h, b1, None))
        else:
            for h, b1, b2 in itertools.product(preds, preds, preds):
                if _type_compatible(t, ent[h], ent[b1], ent[b2]):
                    out.append((t.id, h, b1, b2))
    return out


def generate_candidates(schema: PredicateSchema, max_len: int = 3) -> RuleCatalog:
    """Candidate rules by type-directed path finding over the schema.

    Produces exactly what :func:`enumerate_candidates` does, without the cubic
    scan: body1 is looked up by the head's x-type and body2 by the (z, y)
    types that body1 fixes. The tautology ``h(x,y) <- h(x,y)`` is excluded.
    """
    if max_len not in (2, 3):
        raise SchemaError(f"max_len must be 2 or 3, got {max_len}")
    ent = schema.entries
    by_types: dict[tuple[int, int], list[int]] = defaultdict(list)
    by_dom: dict[int, list[int]] = defaultdict(list)
    by_rng: dict[int, list[int]] = defaultdict(list)
    for p in sorted(ent):
        d, r = ent[p]
        by_types[(d, r)].append(p)
        by_dom[d].append(p)
        by_rng[r].append(p)

    found: list[tuple[str, int, int, Optional[int]]] = []
    for h, (tx, ty) in ent.items():
        for b1 in by_types.get((tx, ty), ()):
            if b1 != h:
                found.append((L2_XY.id, h, b1, None))
        for b1 in by_types.get((ty, tx), ()):
            found.append((L2_YX.id, h, b1, None))
        if max_len < 3:
            continue
        for t in (L3_XZ_ZY, L3_ZX_ZY, L3_XZ_YZ, L3_ZX_YZ):
            # body1 carries x on the subject side (xz) or the object side (zx)
            firsts = by_dom.get(tx, ()) if t.x_first else by_rng.get(tx, ())
            for b1 in firsts:
                tz = ent[b1][1] if t.x_first else ent[b1][0]
                key = (tz, ty) if t.y_last else (ty, tz)
                for b2 in by_types.get(key, ()):
                    found.append((t.id, h, b1, b2))

    found.sort(key=_rule_sort_key)
    check_capacity(len(found), "rules")
    rules = [CandidateRule(i, *row) for i, row in enumerate(found)]
    return index_catalog(RuleCatalog(rules))


def index_catalog(catalog: RuleCatalog) -> RuleCatalog:
    by_body1: dict[int, list[CandidateRule]] = defaultdict(list)
    by_body2: dict[int, list[CandidateRule]] = defaultdict(list)
    by_pair: dict[tuple[int, int], list[CandidateRule]] = defaultdict(list)
    by_head: dict[int, list[CandidateRule]] = defaultdict(list)
    by_template: dict[str, list[CandidateRule]] = defaultdict(list)
    for r in catalog.rules:
        by_body1[r.body1].append(r)
        if r.body2 is not None:
            by_body2[r.body2].append(r)
            by_pair[(r.body1, r.body2)].append(r)
        by_head[r.head].append(r)
        by_template[r.template].append(r)
    catalog.by_body1 = dict(by_body1)
    catalog.by_body2 = dict(by_body2)
    catalog.by_body_pair = dict(by_pair)
    catalog.by_head = dict(by_head)
    catalog.by_template = dict(by_template)
    return catalog


def format_candidates(catalog: RuleCatalog, dictionary: Dictionary) -> Iterator[str]:
    rev = dictionary.reverse
    yield "rule_id\ttemplate\thead\tbody1\tbody2\n"
    for r in catalog.rules:
        b2 = "-" if r.body2 is None else rev[r.body2]
        yield f"{r.rule_id}\t{r.template}\t{rev[r.head]}\t{rev[r.body1]}\t{b2}\n"


def describe_rule(rule: CandidateRule, dictionary: Dictionary) -> str:
    t = TEMPLATE_BY_ID[rule.template]
    preds = [rule.body1] + ([rule.body2] if rule.body2 is not None else [])
    body = " ∧ ".join(
        f"{dictionary.term(p)}({a},{b})" for p, (a, b) in zip(preds, t.atoms)
    )
    return f"{body} → {dictionary.term(rule.head)}(x,y)"


def missing_predicates(schema: PredicateSchema, preds: Iterable[int]) -> list[int]:
    return sorted(int(p) for p in preds if int(p) not in schema.entries)

"""Rule scores as exact (numerator, denominator) counters.

``stdconf`` counts distinct predicted head pairs (denominator) and those
present in the KB (numerator, i.e. support). ``xconf`` counts body
instantiations and those whose head exists. Confidence is derived on demand.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Iterator, Mapping

import numpy as np

from .catalog import RuleCatalog
from .store import Dictionary

STDCONF = "stdconf"
XCONF = "xconf"
METRICS = (STDCONF, XCONF)

ScoreTable = dict[int, tuple[int, int]]
ScoreDelta = dict[int, tuple[int, int]]


class ConsistencyError(RuntimeError):
    """A counter invariant broke; this indicates an engine bug."""


@dataclass(frozen=True)
class RuleScore:
    rule_id: int
    metric_kind: str
    numerator: int
    denominator: int

    @property
    def confidence(self) -> Fraction:
        return confidence(self.numerator, self.denominator)


def confidence(numerator: int, denominator: int) -> Fraction:
    """``numerator / denominator``; a rule that never fired scores 0."""
    if denominator == 0:
        return Fraction(0)
    return Fraction(numerator, denominator)


def combine_deltas(a: Mapping[int, tuple[int, int]], b: Mapping[int, tuple[int, int]]) -> ScoreDelta:
    """Component-wise sum of two deltas: the reduction monoid, no invariant checks."""
    out = dict(a)
    for rid, (dn, dd) in b.items():
        n, d = out.get(rid, (0, 0))
        out[rid] = (n + dn, d + dd)
    return out


def merge_delta(scores: Mapping[int, tuple[int, int]], delta: Mapping[int, tuple[int, int]]) -> ScoreTable:
    """Add ``delta`` into a copy of ``scores``.

    Raises :class:`ConsistencyError` if a merged counter pair ends with
    numerator > denominator or a negative component.
    """
    out = dict(scores)
    for rid, (dn, dd) in delta.items():
        if dn < 0 or dd < 0:
            raise ConsistencyError(f"negative delta for rule {rid}: ({dn}, {dd})")
        n, d = out.get(rid, (0, 0))
        n, d = n + dn, d + dd
        if n > d:
            raise ConsistencyError(f"rule {rid}: numerator {n} exceeds denominator {d}")
        out[rid] = (n, d)
    return out


def delta_from_arrays(rule_ids: np.ndarray, hits: np.ndarray | None, n_rules: int,
                      numerator_only: bool = False) -> ScoreDelta:
    """Per-rule (sum(hits), count) from parallel arrays of rule ids and 0/1 hits."""
    rule_ids = np.asarray(rule_ids, dtype=np.int64)
    counts = np.bincount(rule_ids, minlength=n_rules)
    if hits is None:
        nums = np.zeros_like(counts)
    else:
        nums = np.bincount(rule_ids[np.asarray(hits, dtype=bool)], minlength=n_rules)
    if numerator_only:
        nums, counts = counts, np.zeros_like(counts)
    return delta_from_counts(nums, counts)


def delta_from_counts(numerators: np.ndarray, denominators: np.ndarray) -> ScoreDelta:
    nz = np.flatnonzero((numerators != 0) | (denominators != 0))
    return {int(i): (int(numerators[i]), int(denominators[i])) for i in nz}


def table_to_arrays(scores: Mapping[int, tuple[int, int]], n_rules: int) -> tuple[np.ndarray, np.ndarray]:
    num = np.zeros(n_rules, dtype=np.int64)
    den = np.zeros(n_rules, dtype=np.int64)
    for rid, (n, d) in scores.items():
        num[rid] = n
        den[rid] = d
    return num, den


def nonzero(scores: Mapping[int, tuple[int, int]]) -> ScoreTable:
    """Canonical form: entries with any nonzero counter."""
    return {r: v for r, v in scores.items() if v != (0, 0)}


@dataclass(frozen=True)
class ReportRow:
    rule_id: int
    template: str
    head: str
    body1: str
    body2: str
    metric: str
    numerator: int
    denominator: int
    confidence: Fraction

    def tsv(self) -> str:
        return (
            f"{self.rule_id}\t{self.template}\t{self.head}\t{self.body1}\t{self.body2}\t"
            f"{self.metric}\t{self.numerator}\t{self.denominator}\t{float(self.confidence):.6f}\n"
        )


SCORE_HEADER = "rule_id\ttemplate\thead\tbody1\tbody2\tmetric\tnumerator\tdenominator\tconfidence\n"


def emit_scores(
    scores: Mapping[int, tuple[int, int]],
    catalog: RuleCatalog,
    dictionary: Dictionary,
    min_support: int = 0,
    min_confidence: float = 0.0,
    metric: str = STDCONF,
) -> list[ReportRow]:
    """Report rows for fired rules passing both thresholds.

    Sorted by confidence (descending) then rule_id. ``min_support`` applies to
    the numerator.
    """
    rev = dictionary.reverse
    rows = []
    for rid, (n, d) in scores.items():
        if d <= 0:
            continue
        conf = confidence(n, d)
        if n < min_support or conf < min_confidence:
            continue
        r = catalog.rules[rid]
        rows.append(ReportRow(
            rid, r.template, rev[r.head], rev[r.body1],
            "-" if r.body2 is None else rev[r.body2],
            metric, n, d, conf,
        ))
    rows.sort(key=lambda row: (-row.confidence, row.rule_id))
    return rows


def format_report(rows_by_metric: Mapping[str, Iterable[ReportRow]]) -> Iterator[str]:
    yield SCORE_HEADER
    for metric in METRICS:
        for row in rows_by_metric.get(metric, ()):
            yield row.tsv()


def read_score_tsv(lines: Iterable[str]) -> dict[str, ScoreTable]:
    """Parse a score TSV back into per-metric counter tables."""
    out: dict[str, ScoreTable] = {}
    for line in lines:
        if not line.strip() or line.startswith("rule_id\t"):
            continue
        f = line.rstrip("\n").split("\t")
        out.setdefault(f[5], {})[int(f[0])] = (int(f[6]), int(f[7]))
    return out


def checksum(scores: Mapping[int, tuple[int, int]]) -> str:
    h = hashlib.sha256()
    for rid in sorted(scores):
        n, d = scores[rid]
        if (n, d) != (0, 0):
            h.update(f"{rid}:{n}:{d};".encode())
    return h.hexdigest()[:16]

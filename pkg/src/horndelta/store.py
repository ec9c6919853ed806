"""Dictionary-encoded triple storage for the cumulated KB and its update batches."""
from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence, Union

import numpy as np

from .keys import ID_BITS, KeySet, check_capacity, isin_sorted, pack3, unpack3

SNAPSHOT_FORMAT = "horndelta-kb"
SNAPSHOT_VERSION = 1

_EMPTY = np.zeros(0, dtype=np.int64)
_SPAN = np.int64(1 << ID_BITS)

Source = Union[str, os.PathLike, Iterable[str]]


class ParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SnapshotError(ValueError):
    pass


class Triple(NamedTuple):
    predicate: int
    subject: int
    object: int


class Dictionary:
    """Bijective term-string <-> dense term-id mapping, ids in first-seen order."""

    def __init__(self, terms: Iterable[str] = ()):
        self.forward: dict[str, int] = {}
        self.reverse: list[str] = []
        for t in terms:
            self.intern(t)

    def intern(self, term: str) -> int:
        tid = self.forward.get(term)
        if tid is None:
            tid = len(self.reverse)
            check_capacity(tid + 1)
            self.forward[term] = tid
            self.reverse.append(term)
        return tid

    def id_of(self, term: str) -> int:
        return self.forward[term]

    def term(self, tid: int) -> str:
        return self.reverse[tid]

    def decode(self, ids: Iterable[int]) -> list[str]:
        rev = self.reverse
        return [rev[i] for i in ids]

    def copy(self) -> "Dictionary":
        d = Dictionary()
        d.forward = dict(self.forward)
        d.reverse = list(self.reverse)
        return d

    def __len__(self) -> int:
        return len(self.reverse)

    def __contains__(self, term: object) -> bool:
        return term in self.forward

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Dictionary) and self.reverse == other.reverse

    def __repr__(self) -> str:
        return f"Dictionary({len(self)} terms)"


class Facts:
    """Columnar list of triples: parallel int64 arrays ``p``, ``s``, ``o``.

    Iterating yields :class:`Triple` values, so a ``Facts`` can be used where a
    list of triples is expected.
    """

    __slots__ = ("p", "s", "o")

    def __init__(self, p, s, o):
        self.p = np.ascontiguousarray(p, dtype=np.int64)
        self.s = np.ascontiguousarray(s, dtype=np.int64)
        self.o = np.ascontiguousarray(o, dtype=np.int64)
        if not (self.p.shape == self.s.shape == self.o.shape and self.p.ndim == 1):
            raise ValueError("p, s, o must be 1-d arrays of equal length")

    @classmethod
    def empty(cls) -> "Facts":
        return cls(_EMPTY, _EMPTY, _EMPTY)

    @classmethod
    def from_triples(cls, triples: Iterable[Sequence[int]]) -> "Facts":
        if isinstance(triples, Facts):
            return triples
        rows = list(triples)
        if not rows:
            return cls.empty()
        arr = np.asarray(rows, dtype=np.int64).reshape(-1, 3)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2])

    @classmethod
    def from_keys(cls, keys: np.ndarray) -> "Facts":
        return cls(*unpack3(keys))

    @classmethod
    def concat(cls, parts: Sequence["Facts"]) -> "Facts":
        parts = [f for f in parts if len(f)]
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([f.p for f in parts]),
            np.concatenate([f.s for f in parts]),
            np.concatenate([f.o for f in parts]),
        )

    def keys(self) -> np.ndarray:
        return pack3(self.p, self.s, self.o)

    def take(self, idx) -> "Facts":
        return Facts(self.p[idx], self.s[idx], self.o[idx])

    def distinct(self) -> "Facts":
        """Deduplicated copy, keeping first occurrences in input order."""
        _, first = np.unique(self.keys(), return_index=True)
        return self.take(np.sort(first))

    def column(self, position: str) -> np.ndarray:
        if position == "subject":
            return self.s
        if position == "object":
            return self.o
        raise ValueError(f"unknown position {position!r}")

    def __len__(self) -> int:
        return int(self.p.size)

    def __iter__(self) -> Iterator[Triple]:
        for p, s, o in zip(self.p.tolist(), self.s.tolist(), self.o.tolist()):
            yield Triple(p, s, o)

    def __getitem__(self, i: int) -> Triple:
        return Triple(int(self.p[i]), int(self.s[i]), int(self.o[i]))

    def __repr__(self) -> str:
        return f"Facts({len(self)})"


class TripleStore:
    """Immutable, deduplicated set of triples with secondary indices.

    Facts are held in ``(p, s, o)`` key order, which doubles as the
    ``(predicate, subject) -> objects`` index. The other indices are sorted
    permutations built on first use.
    """

    def __init__(self, facts: Facts | Iterable[Sequence[int]] = (), *, presorted: bool = False):
        facts = Facts.from_triples(facts)
        keys = facts.keys()
        if not presorted:
            keys = np.unique(keys)
        self.keys = keys
        self.p, self.s, self.o = unpack3(keys)

    @classmethod
    def from_sorted_keys(cls, keys: np.ndarray) -> "TripleStore":
        store = cls.__new__(cls)
        store.keys = keys
        store.p, store.s, store.o = unpack3(keys)
        return store

    @property
    def fact_count(self) -> int:
        return int(self.keys.size)

    def __len__(self) -> int:
        return int(self.keys.size)

    @property
    def facts(self) -> Facts:
        return Facts(self.p, self.s, self.o)

    def fact_set(self) -> frozenset[Triple]:
        return frozenset(self.facts)

    def __contains__(self, triple: object) -> bool:
        p, s, o = triple  # type: ignore[misc]
        return bool(isin_sorted(pack3([p], [s], [o]), self.keys)[0])

    def contains_keys(self, keys: np.ndarray) -> np.ndarray:
        return self.key_set.contains(keys)

    @cached_property
    def key_set(self) -> KeySet:
        return KeySet(self.keys)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, TripleStore) and np.array_equal(self.keys, other.keys)

    def __repr__(self) -> str:
        return f"TripleStore({self.fact_count} facts)"

    # -- indices -----------------------------------------------------------
    @cached_property
    def by_pred_obj(self) -> np.ndarray:
        """Sorted ``(p, o, s)`` keys."""
        return np.sort(pack3(self.p, self.o, self.s))

    @cached_property
    def by_sub(self) -> np.ndarray:
        """Permutation of fact positions ordered by subject."""
        return np.argsort(self.s)

    @cached_property
    def by_obj(self) -> np.ndarray:
        return np.argsort(self.o)

    @cached_property
    def _sub_sorted(self) -> np.ndarray:
        return self.s[self.by_sub]

    @cached_property
    def _obj_sorted(self) -> np.ndarray:
        return self.o[self.by_obj]

    @cached_property
    def predicates(self) -> np.ndarray:
        return np.unique(self.p)

    def predicate_range(self, p: int) -> tuple[int, int]:
        lo = pack3([p], [0], [0])[0]
        a, b = np.searchsorted(self.keys, [lo, lo + (_SPAN * _SPAN)])
        return int(a), int(b)

    def with_predicates(self, preds) -> Facts:
        """Facts whose predicate is in ``preds``, in key order."""
        preds = np.unique(np.asarray(preds, dtype=np.int64))
        if preds.size == 0 or self.fact_count == 0:
            return Facts.empty()
        lo = preds << np.int64(2 * ID_BITS)
        starts = np.searchsorted(self.keys, lo)
        ends = np.searchsorted(self.keys, lo + (_SPAN * _SPAN))
        return self.facts.take(_ranges(starts, ends))

    def objects(self, p: int, s: int) -> np.ndarray:
        lo = pack3([p], [s], [0])[0]
        a, b = np.searchsorted(self.keys, [lo, lo + _SPAN])
        return self.o[a:b]

    def subjects(self, p: int, o: int) -> np.ndarray:
        lo = pack3([p], [o], [0])[0]
        idx = self.by_pred_obj
        a, b = np.searchsorted(idx, [lo, lo + _SPAN])
        return idx[a:b] & np.int64((1 << ID_BITS) - 1)

    def with_subject(self, s: int) -> Facts:
        a, b = np.searchsorted(self._sub_sorted, [s, s + 1])
        return self.facts.take(np.sort(self.by_sub[a:b]))

    def with_object(self, o: int) -> Facts:
        a, b = np.searchsorted(self._obj_sorted, [o, o + 1])
        return self.facts.take(np.sort(self.by_obj[a:b]))

    def positions_with(self, position: str, keys: np.ndarray, term_order: bool = False) -> np.ndarray:
        """Fact positions whose ``position`` term is in ``keys``, via the index.

        Positions come back in key order, or grouped by that term with
        ``term_order``.
        """
        if position == "subject":
            perm, col = self.by_sub, self._sub_sorted
        elif position == "object":
            perm, col = self.by_obj, self._obj_sorted
        else:
            raise ValueError(f"unknown position {position!r}")
        keys = np.unique(np.asarray(keys, dtype=np.int64))
        starts = np.searchsorted(col, keys)
        ends = np.searchsorted(col, keys, side="right")
        pos = perm[_ranges(starts, ends)]
        return pos if term_order else np.sort(pos)


def _ranges(starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Concatenation of ``arange(a, b)`` for each pair."""
    lengths = ends - starts
    keep = lengths > 0
    starts, lengths = starts[keep], lengths[keep]
    total = int(lengths.sum())
    if total == 0:
        return _EMPTY
    offsets = np.repeat(starts - np.cumsum(lengths) + lengths, lengths)
    return offsets + np.arange(total, dtype=np.int64)


@dataclass
class UpdateBatch:
    facts: Facts
    batch_index: int = 0

    def __len__(self) -> int:
        return len(self.facts)


# -- ingestion ----------------------------------------------------------------

def _lines(source: Source) -> Iterator[str]:
    if isinstance(source, (str, os.PathLike)) and not isinstance(source, io.IOBase):
        with open(source, encoding="utf-8") as fh:
            yield from fh
    else:
        yield from source


def ingest_triples(source: Source, dictionary: Dictionary | None = None) -> tuple[Dictionary, Facts]:
    """Parse ``subject<TAB>predicate<TAB>object`` rows into encoded triples.

    Blank lines and ``#`` comments are skipped. Duplicates are kept; the store
    removes them. Pass an existing ``dictionary`` to encode an update batch
    against the same term space.
    """
    d = dictionary if dictionary is not None else Dictionary()
    intern = d.intern
    ps: list[int] = []
    ss: list[int] = []
    os_: list[int] = []
    for lineno, raw in enumerate(_lines(source), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ParseError(f"expected 3 tab-separated fields, got {len(fields)}", lineno)
        sub, pred, obj = fields
        if not sub or not pred or not obj:
            raise ParseError("empty field", lineno)
        ss.append(intern(sub))
        ps.append(intern(pred))
        os_.append(intern(obj))
    return d, Facts(ps, ss, os_)


def format_triples(facts: Iterable[Sequence[int]], dictionary: Dictionary) -> Iterator[str]:
    rev = dictionary.reverse
    for p, s, o in facts:
        yield f"{rev[s]}\t{rev[p]}\t{rev[o]}\n"


def build_store(triples: Iterable[Sequence[int]] | Facts) -> TripleStore:
    return TripleStore(triples)


def apply_update(
    store: TripleStore, raw: Iterable[Sequence[int]] | Facts, batch_index: int = 0
) -> tuple[TripleStore, UpdateBatch]:
    """Return ``(store ∪ batch, batch)`` where batch = raw minus store, deduplicated.

    The batch keeps the first-occurrence order of ``raw``.
    """
    raw = Facts.from_triples(raw)
    keys = raw.keys()
    uniq, first = np.unique(keys, return_index=True)
    new = ~store.contains_keys(uniq)
    order = np.sort(first[new])
    batch = UpdateBatch(raw.take(order), batch_index)
    if not order.size:
        return store, batch
    merged = np.sort(np.concatenate([store.keys, uniq[new]]), kind="mergesort")
    return TripleStore.from_sorted_keys(merged), batch


# -- snapshots ----------------------------------------------------------------

def snapshot(store: TripleStore, dictionary: Dictionary, path: str | os.PathLike) -> Path:
    """Write ``manifest.json``, ``dictionary.txt`` and ``triples.tsv`` under ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for t in dictionary.reverse:
        if "\n" in t or "\r" in t:
            raise SnapshotError(f"term {t!r} contains a line break")
    with open(root / "dictionary.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(t + "\n" for t in dictionary.reverse)
    rows = np.column_stack([store.s, store.p, store.o])
    with open(root / "triples.tsv", "w", encoding="utf-8", newline="\n") as fh:
        if rows.size:
            np.savetxt(fh, rows, fmt="%d", delimiter="\t")
    manifest = {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "terms": len(dictionary),
        "facts": store.fact_count,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return root


def load(path: str | os.PathLike) -> tuple[TripleStore, Dictionary]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format") != SNAPSHOT_FORMAT or manifest.get("version") != SNAPSHOT_VERSION:
        raise SnapshotError(
            f"unsupported snapshot {manifest.get('format')!r} v{manifest.get('version')!r}"
        )
    d = Dictionary()
    with open(root / "dictionary.txt", encoding="utf-8", newline="\n") as fh:
        for line in fh:
            d.intern(line[:-1] if line.endswith("\n") else line)
    text = (root / "triples.tsv").read_text(encoding="utf-8")
    ids = np.fromstring(text, dtype=np.int64, sep=" ") if text.strip() else _EMPTY
    rows = ids.reshape(-1, 3)
    store = TripleStore(Facts(rows[:, 1], rows[:, 0], rows[:, 2]))
    if len(d) != manifest["terms"] or store.fact_count != manifest["facts"]:
        raise SnapshotError("snapshot counts do not match its manifest")
    return store, d

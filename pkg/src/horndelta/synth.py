"""Synthetic typed KBs with power-law entity degrees, and base/update splits."""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .catalog import PredicateSchema
from .store import Dictionary, Facts

SPLIT_MANIFEST = "split.json"
GEN_MANIFEST = "manifest.json"


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class GenParams:
    """Generator knobs.

    ``skew_exponent`` is the exponent ``a`` of the degree distribution
    ``P(deg = k) ~ k^-a`` (must exceed 1). Each predicate draws its subjects
    and objects from its own random ranking of the typed entity pool, with
    rank weights ``k^(-1/(a-1))``. ``hub_degree`` adds one entity that is the
    object of that many facts of the first predicate.
    """

    n_entities: int
    n_predicates: int
    n_facts: int
    skew_exponent: float = 2.0
    n_types: int = 4
    seed: int = 0
    hub_degree: int = 0

    def validate(self) -> None:
        if self.n_entities < 1 or self.n_predicates < 1 or self.n_types < 1:
            raise GenerationError("entity/predicate/type counts must be positive")
        if self.n_facts < 0 or self.hub_degree < 0:
            raise GenerationError("fact counts must be non-negative")
        if self.skew_exponent <= 1.0:
            raise GenerationError(f"skew exponent must exceed 1, got {self.skew_exponent}")
        if self.n_types > self.n_entities:
            raise GenerationError("more types than entities")
        if self.n_facts > self.n_entities ** 2 * self.n_predicates:
            raise GenerationError("more facts requested than distinct triples exist")
        if self.hub_degree > self.n_facts:
            raise GenerationError("hub degree exceeds the fact count")


@dataclass
class SyntheticKB:
    params: GenParams
    predicate_types: list[tuple[int, int]]
    entity_type: np.ndarray
    facts: Facts  # p in [0, P), s/o are entity indices

    def predicate_name(self, p: int) -> str:
        return f"p{p}"

    def entity_name(self, e: int) -> str:
        return f"e{e}"

    def schema_lines(self) -> list[str]:
        return [f"p{p}\tT{d}\tT{r}\n" for p, (d, r) in enumerate(self.predicate_types)]

    def triple_lines(self) -> list[str]:
        return [f"e{s}\tp{p}\te{o}\n" for p, s, o in zip(
            self.facts.p.tolist(), self.facts.s.tolist(), self.facts.o.tolist())]

    def encode(self) -> tuple[Dictionary, PredicateSchema, Facts]:
        """Encoded form equal to parsing the schema then the triples file."""
        d = Dictionary(f"p{p}" for p in range(len(self.predicate_types)))
        schema = PredicateSchema()
        for p, (dom, rng) in enumerate(self.predicate_types):
            schema.add(p, schema.types.intern(f"T{dom}"), schema.types.intern(f"T{rng}"))
        # entities in first-seen order of the triples file (subject, then object, row by row)
        seen = np.column_stack([self.facts.s, self.facts.o]).ravel()
        _, first = np.unique(seen, return_index=True)
        order = seen[np.sort(first)]
        base = len(d)
        for e in order.tolist():
            d.intern(f"e{e}")
        remap = np.zeros(self.params.n_entities, dtype=np.int64)
        remap[order] = np.arange(base, base + order.size)
        return d, schema, Facts(self.facts.p, remap[self.facts.s], remap[self.facts.o])

    def write(self, directory: str | Path) -> Path:
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        with open(root / "schema.tsv", "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(self.schema_lines())
        with open(root / "kb.tsv", "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(self.triple_lines())
        manifest = {"generator": asdict(self.params), "facts": len(self.facts),
                    "predicates": len(self.predicate_types)}
        (root / GEN_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return root


def _type_pairs(n_types: int, n_predicates: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    if n_types == 1:
        return [(0, 0)] * n_predicates
    # distinct domain and range keep a predicate from joining with itself on z
    pairs = [(a, b) for a, b in itertools.product(range(n_types), repeat=2) if a != b]
    out: list[tuple[int, int]] = []
    while len(out) < n_predicates:
        for i in rng.permutation(len(pairs)):
            out.append(pairs[int(i)])
    return out[:n_predicates]


def _zipf_cdf(n: int, exponent: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** (-1.0 / (exponent - 1.0))
    cdf = np.cumsum(w)
    return cdf / cdf[-1]


def generate_kb(params: GenParams) -> SyntheticKB:
    """Deterministic KB for ``params`` (same seed, same output)."""
    params.validate()
    rng = np.random.default_rng(params.seed)
    P = params.n_predicates
    types = _type_pairs(params.n_types, P, rng)
    entity_type = np.arange(params.n_entities, dtype=np.int64) % params.n_types
    pools = [np.flatnonzero(entity_type == t) for t in range(params.n_types)]
    cdfs = {t: _zipf_cdf(len(pools[t]), params.skew_exponent) for t in range(params.n_types)}

    spread = params.n_facts - params.hub_degree
    quota = np.full(P, spread // P, dtype=np.int64)
    quota[: spread % P] += 1
    parts: list[Facts] = []
    hub_keys = np.zeros(0, dtype=np.int64)

    if params.hub_degree:
        dom, rng_t = types[0]
        if params.hub_degree > len(pools[dom]):
            raise GenerationError("hub degree exceeds the subject pool of the first predicate")
        hub = int(rng.choice(pools[rng_t]))
        subs = rng.choice(pools[dom], size=params.hub_degree, replace=False)
        parts.append(Facts(np.zeros(subs.size, dtype=np.int64), subs, np.full(subs.size, hub)))
        hub_keys = np.sort((subs << np.int64(32)) | hub)

    for p in range(P):
        dom, rng_t = types[p]
        sp, op = pools[dom], pools[rng_t]
        need = int(quota[p])
        if need + (params.hub_degree if p == 0 else 0) > sp.size * op.size:
            raise GenerationError(f"predicate p{p} cannot hold {need} distinct facts")
        rank_s = rng.permutation(sp)
        rank_o = rng.permutation(op)
        have = hub_keys if p == 0 else np.zeros(0, dtype=np.int64)
        got = np.zeros(0, dtype=np.int64)
        for _ in range(1000):
            missing = need - got.size
            if missing <= 0:
                break
            k = int(missing * 1.2) + 16
            s = rank_s[np.searchsorted(cdfs[dom], rng.random(k), side="right").clip(max=sp.size - 1)]
            o = rank_o[np.searchsorted(cdfs[rng_t], rng.random(k), side="right").clip(max=op.size - 1)]
            keys = (s << np.int64(32)) | o
            keys = keys[~np.isin(keys, have)]
            _, first = np.unique(keys, return_index=True)
            keys = keys[np.sort(first)]
            keys = keys[~np.isin(keys, got)][:missing]
            got = np.concatenate([got, keys])
        else:
            raise GenerationError(f"could not draw {need} distinct facts for p{p}; lower the skew or fact count")
        parts.append(Facts(np.full(got.size, p), got >> np.int64(32), got & np.int64(0xFFFFFFFF)))

    facts = Facts.concat(parts)
    return SyntheticKB(params, types, entity_type, facts)


@dataclass(frozen=True)
class SplitSpec:
    base_fraction: float = 0.9
    update_fractions: tuple[float, ...] = field(default_factory=lambda: (0.1,))
    seed: int = 0

    def validate(self) -> None:
        fr = (self.base_fraction, *self.update_fractions)
        if any(f < 0 for f in fr):
            raise GenerationError("fractions must be non-negative")
        if sum(fr) > 1.0 + 1e-9:
            raise GenerationError(f"fractions sum to {sum(fr):.6g} > 1")


@dataclass
class Split:
    base: np.ndarray  # row indices into the KB
    batches: list[np.ndarray]
    discarded: int

    def manifest(self, spec: SplitSpec, total: int) -> dict:
        return {
            "seed": spec.seed,
            "total_facts": total,
            "base_fraction": spec.base_fraction,
            "update_fractions": list(spec.update_fractions),
            "base_size": int(self.base.size),
            "batch_sizes": [int(b.size) for b in self.batches],
            "discarded": self.discarded,
        }


def split_indices(n: int, spec: SplitSpec) -> Split:
    """Uniform random partition of ``range(n)`` into base and update batches.

    Sizes are rounded cumulatively, so each part is within one fact of its
    fraction. Rows not covered by any fraction are discarded.
    """
    spec.validate()
    perm = np.random.default_rng(spec.seed).permutation(n)
    cum = np.cumsum((spec.base_fraction, *spec.update_fractions))
    edges = np.minimum(np.rint(cum * n).astype(np.int64), n)
    starts = np.concatenate(([0], edges[:-1]))
    parts = [np.sort(perm[a:b]) for a, b in zip(starts, edges)]
    return Split(parts[0], parts[1:], int(n - edges[-1]))


def split_updates(lines: Sequence[str], spec: SplitSpec, directory: str | Path | None = None
                  ) -> tuple[list[str], list[list[str]], dict]:
    """Split the rows of a triples file; optionally write ``base.tsv``, ``batch_<i>.tsv`` and a manifest."""
    rows = [l if l.endswith("\n") else l + "\n" for l in lines if l.strip() and not l.lstrip().startswith("#")]
    sp = split_indices(len(rows), spec)
    base = [rows[i] for i in sp.base.tolist()]
    batches = [[rows[i] for i in b.tolist()] for b in sp.batches]
    manifest = sp.manifest(spec, len(rows))
    if directory is not None:
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        (root / "base.tsv").write_text("".join(base), encoding="utf-8")
        names = []
        for i, b in enumerate(batches, start=1):
            name = f"batch_{i:03d}.tsv"
            (root / name).write_text("".join(b), encoding="utf-8")
            names.append(name)
        manifest["batch_files"] = names
        (root / SPLIT_MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return base, batches, manifest

"""On-disk incremental sessions: a state directory advanced one batch at a time.

Layout::

    manifest.json      mode, metric, join config, applied batches (sha256)
    schema.tsv         copy of the schema the catalog is generated from
    kb/                store snapshot
    scores.tsv         cumulative counters of every fired rule
    intermediate.tsv   vanilla mode only: head subject object rule_id
    deltas/batch_NNNN.tsv   per-batch counter increments
"""
from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .batch import check_coverage
from .catalog import PredicateSchema, RuleCatalog, generate_candidates, parse_schema
from .engine import VANILLA, BatchReport, EngineConfig, EngineState, IntermediateStore, apply_batch, bootstrap
from .join import JoinConfig
from .keys import pack3, unpack3
from .metrics import emit_scores, format_report, read_score_tsv
from .store import Dictionary, TripleStore, ingest_triples, load, snapshot

STATE_FORMAT = "horndelta-state"
STATE_VERSION = 1


class StateError(ValueError):
    pass


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def join_config_dict(cfg: JoinConfig) -> dict:
    d = asdict(cfg)
    d.pop("workers")  # a runtime knob, never changes results
    return d


@dataclass
class Session:
    root: Path
    dictionary: Dictionary
    schema: PredicateSchema
    catalog: RuleCatalog
    state: EngineState
    manifest: dict

    # -- creation / loading ------------------------------------------------
    @classmethod
    def init(cls, root: str | Path, kb: str | Path, schema_path: str | Path, mode: str,
             join: JoinConfig, max_len: int = 3, force: bool = False) -> "Session":
        root = Path(root)
        if (root / "manifest.json").exists() and not force:
            raise StateError(f"{root} already holds a session")
        d = Dictionary()
        schema = parse_schema(schema_path, d)
        d, facts = ingest_triples(kb, d)
        store = TripleStore(facts)
        check_coverage(store, schema, d)
        catalog = generate_candidates(schema, max_len)
        state = bootstrap(store, catalog, EngineConfig(mode, join))
        root.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(schema_path, root / "schema.tsv")
        manifest = {
            "format": STATE_FORMAT,
            "version": STATE_VERSION,
            "mode": mode,
            "metric": state.config.metric,
            "max_len": max_len,
            "join": join_config_dict(join),
            "base": {"file": str(kb), "sha256": file_digest(kb), "facts": store.fact_count},
            "batches": [],
        }
        s = cls(root, d, schema, catalog, state, manifest)
        s.save()
        return s

    @classmethod
    def open(cls, root: str | Path, workers: int = 1) -> "Session":
        root = Path(root)
        try:
            manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise StateError(f"{root} is not a session directory") from None
        if manifest.get("format") != STATE_FORMAT or manifest.get("version") != STATE_VERSION:
            raise StateError(f"unsupported state format in {root}")
        store, d = load(root / "kb")
        schema = parse_schema(root / "schema.tsv", d)
        catalog = generate_candidates(schema, manifest["max_len"])
        join = JoinConfig(workers=workers, **manifest["join"])
        cfg = EngineConfig(manifest["mode"], join)
        n = len(catalog)
        num = np.zeros(n, dtype=np.int64)
        den = np.zeros(n, dtype=np.int64)
        with open(root / "scores.tsv", encoding="utf-8") as fh:
            table = read_score_tsv(fh).get(cfg.metric, {})
        for rid, (a, b) in table.items():
            num[rid], den[rid] = a, b
        inter = None
        if cfg.mode == VANILLA:
            inter = _read_intermediate(root / "intermediate.tsv", d, catalog)
        state = EngineState(store, catalog, num, den, cfg, inter, len(manifest["batches"]))
        return cls(root, d, schema, catalog, state, manifest)

    # -- updates -----------------------------------------------------------
    def update(self, batch_path: str | Path) -> BatchReport:
        digest = file_digest(batch_path)
        for b in self.manifest["batches"]:
            if b["sha256"] == digest:
                raise StateError(f"batch {batch_path} was already applied (as batch {b['index']})")
        d, facts = ingest_triples(batch_path, self.dictionary)
        missing = sorted({int(p) for p in np.unique(facts.p)} - set(self.schema.entries))
        if missing:
            raise StateError("predicates missing from schema: " + ", ".join(d.term(p) for p in missing))
        report = apply_batch(self.state, facts)
        index = len(self.manifest["batches"]) + 1
        self.manifest["batches"].append({
            "index": index,
            "file": str(batch_path),
            "sha256": digest,
            "facts_read": len(facts),
            "facts_added": len(report.batch),
        })
        self.save(delta=(index, report))
        return report

    # -- persistence -------------------------------------------------------
    def report_lines(self, min_support: int = 0, min_confidence: float = 0.0) -> list[str]:
        metric = self.state.config.metric
        rows = emit_scores(self.state.scores, self.catalog, self.dictionary, min_support, min_confidence, metric)
        return list(format_report({metric: rows}))

    def save(self, delta: Optional[tuple[int, BatchReport]] = None) -> None:
        root = self.root
        snapshot(self.state.store, self.dictionary, root / "kb")
        _atomic_write(root / "scores.tsv", "".join(self.report_lines()))
        if self.state.intermediate is not None:
            _atomic_write(root / "intermediate.tsv", "".join(
                _intermediate_lines(self.state.intermediate, self.dictionary)))
        if delta is not None:
            index, report = delta
            (root / "deltas").mkdir(exist_ok=True)
            metric = self.state.config.metric
            body = "rule_id\tmetric\tnumerator\tdenominator\n" + "".join(
                f"{rid}\t{metric}\t{n}\t{dd}\n" for rid, (n, dd) in sorted(report.delta.items()))
            _atomic_write(root / "deltas" / f"batch_{index:04d}.tsv", body)
        _atomic_write(root / "manifest.json", json.dumps(self.manifest, indent=2) + "\n")


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _intermediate_lines(inter: IntermediateStore, d: Dictionary):
    rev = d.reverse
    yield "head\tsubject\tobject\trule_id\n"
    rule, x, y = unpack3(inter.keys)
    for h, s, o, r in zip(inter.heads[rule].tolist(), x.tolist(), y.tolist(), rule.tolist()):
        yield f"{rev[h]}\t{rev[s]}\t{rev[o]}\t{r}\n"


def _read_intermediate(path: Path, d: Dictionary, catalog: RuleCatalog) -> IntermediateStore:
    heads = catalog.head_array
    rows = []
    with open(path, encoding="utf-8") as fh:
        next(fh, None)
        for line in fh:
            if line.strip():
                h, s, o, r = line.rstrip("\n").split("\t")
                rows.append((d.id_of(h), d.id_of(s), d.id_of(o), int(r)))
    if not rows:
        return IntermediateStore.empty(heads)
    arr = np.asarray(rows, dtype=np.int64)
    if np.any(arr[:, 3] >= heads.size) or np.any(heads[arr[:, 3]] != arr[:, 0]):
        raise StateError("intermediate.tsv does not match the rule catalog")
    return IntermediateStore(np.unique(pack3(arr[:, 3], arr[:, 1], arr[:, 2])), heads)

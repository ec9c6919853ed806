"""Acceptance criteria, each run at its stated size and tolerance.

Every test records one PASS/FAIL line, shown in the terminal summary.
"""
from __future__ import annotations

import dataclasses
import os
import time
from pathlib import Path

import numpy as np
import pytest

from horndelta.batch import brute_force_scores, mine_batch
from horndelta.bench import BenchConfig, _Fixture, benchmark_run, median_ms
from horndelta.catalog import generate_candidates, parse_schema
from horndelta.cli import main
from horndelta.engine import MODES, EngineConfig, run_incremental
from horndelta.join import JoinConfig, default_workers
from horndelta.metrics import XCONF
from horndelta.store import Dictionary, Facts, TripleStore, ingest_triples
from horndelta.synth import GenParams, SplitSpec, generate_kb, split_indices

from conftest import random_kb, record_criterion

# score tables of every KB from criteria 1 and 2, checked by criterion 3
_SEEN: list[dict] = []


def canonical(table) -> list[str]:
    return sorted(f"{r}\t{n}\t{d}" for r, (n, d) in table.items() if (n, d) != (0, 0))


def test_c1_oracle_equivalence(tmp_path):
    t0 = time.perf_counter()
    bad = []
    for seed in range(200):
        rng = np.random.default_rng(seed)
        schema, catalog, rows = random_kb(rng, max_facts=2000, max_preds=20, max_types=5, max_entities=400)
        store = TripleStore(rows)
        got = mine_batch(store, catalog, None, "both").scores
        want = brute_force_scores(store, catalog, "both")
        _SEEN.append(got)
        if got != want:
            bad.append(seed)
    # the same check through the executable on a sample of the KBs
    cli_bad = []
    for seed in range(0, 200, 20):
        kb = generate_kb(GenParams(150, int(seed % 7) + 2, 1500, n_types=int(seed % 5) + 1, seed=seed))
        root = kb.write(tmp_path / f"kb{seed}")
        outs = []
        for cmd in ("batch", "oracle"):
            out = root / f"{cmd}.tsv"
            assert main(["mine", cmd, "--kb", str(root / "kb.tsv"), "--schema", str(root / "schema.tsv"),
                         "--metric", "both", "-o", str(out)]) == 0
            outs.append(out.read_bytes())
        if outs[0] != outs[1]:
            cli_bad.append(seed)
    secs = time.perf_counter() - t0
    ok = not bad and not cli_bad and secs < 120
    record_criterion("1 oracle equivalence", ok,
                     f"200 KBs + 10 via CLI, mismatches={bad + cli_bad}, {secs:.1f}s (limit 120s)")
    assert ok


def test_c2_incremental_equals_batch():
    t0 = time.perf_counter()
    bad = []
    for seed in range(50):
        rng = np.random.default_rng(10_000 + seed)
        schema, catalog, rows = random_kb(rng, max_facts=50_000, max_preds=20, max_types=5, sparse=True)
        facts = Facts.from_triples(rows)
        k = int(rng.integers(1, 11))
        fractions = rng.dirichlet(np.ones(k)) * float(rng.uniform(0.05, 0.5))
        sp = split_indices(len(facts), SplitSpec(1.0 - float(fractions.sum()), tuple(fractions.tolist()), seed))
        facts = facts.take(np.concatenate([sp.base, *sp.batches]))  # the KB is what the parts cover
        n_base = sp.base.size
        sizes = np.cumsum([n_base] + [b.size for b in sp.batches])
        parts = [facts.take(np.arange(a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
        ref = mine_batch(TripleStore(facts), catalog, None, "both").scores
        _SEEN.append(ref)
        for mode in MODES:
            state, _ = run_incremental(parts, catalog, EngineConfig(mode),
                                       base=TripleStore(facts.take(np.arange(n_base))))
            if canonical(state.scores) != canonical(ref[state.config.metric]):
                bad.append((seed, mode))
    secs = time.perf_counter() - t0
    ok = not bad and secs < 600
    record_criterion("2 incremental == batch", ok, f"50 KBs x 3 modes, mismatches={bad}, {secs:.1f}s (limit 600s)")
    assert ok


def test_c3_nonzero_sets_agree():
    if not _SEEN:
        pytest.skip("needs criteria 1 and 2 in the same run")
    bad = [i for i, s in enumerate(_SEEN)
           if {r for r, (n, _) in s["stdconf"].items() if n} != {r for r, (n, _) in s["xconf"].items() if n}]
    ok = not bad
    record_criterion("3 nonzero stdconf iff nonzero xconf", ok, f"{len(_SEEN)} KBs, violations={bad}")
    assert ok


def test_c4_invariance_suite():
    kb = generate_kb(GenParams(4000, 20, 20_000, skew_exponent=2.0, n_types=3, seed=4, hub_degree=500))
    _, schema, facts = kb.encode()
    catalog = generate_candidates(schema)
    store = TripleStore(facts)
    sp = split_indices(len(facts), SplitSpec(0.9, (0.05, 0.05), seed=4))
    base, batches = TripleStore(facts.take(sp.base)), [facts.take(b) for b in sp.batches]

    def tables(cfg: JoinConfig):
        out = {"batch": mine_batch(store, catalog, cfg, "both").scores}
        for mode in MODES:
            out[mode] = run_incremental(batches, catalog, EngineConfig(mode, cfg), base=base)[0].scores
        return out

    ref = tables(JoinConfig())
    variants = [("filter", f) for f in ("broadcast", "join")] + [("m", m) for m in (1, 7, 300, 30_000)] \
        + [("branch", b) for b in ("rules", "facts")] \
        + [("workers", w) for w in sorted({1, 4, max(os.cpu_count() or 1, default_workers())})]
    bad = []
    for kind, v in variants:
        cfg = {"filter": lambda: JoinConfig(filter_strategy=v), "m": lambda: JoinConfig(max_group_size=v),
               "branch": lambda: JoinConfig(join_strategy=v), "workers": lambda: JoinConfig(workers=v)}[kind]()
        if tables(cfg) != ref:
            bad.append((kind, v))
    ok = not bad
    record_criterion("4 invariance suite", ok,
                     f"20k-fact skewed KB, {len(catalog)} rules, {len(variants)} variants, changed={bad}")
    assert ok


# -- timing criteria on 1M-fact KBs ---------------------------------------------

@pytest.fixture(scope="module")
def million():
    cfg = BenchConfig(repeats=3, join=JoinConfig(workers=default_workers()))
    return cfg, _Fixture(cfg)


def test_c5a_adaptive_join_vs_rules_loop(million):
    cfg, fx = million
    rows = benchmark_run("join-variants", cfg, fx)
    ratio = median_ms(rows, "rules") / median_ms(rows, "adaptive")
    ok = ratio >= 3.0 and len(fx.catalog) >= 5000
    record_criterion("5a adaptive join >= 3x rules-only", ok,
                     f"{fx.store.fact_count} facts, {len(fx.catalog)} rules, "
                     f"rules {median_ms(rows, 'rules'):.0f} ms / adaptive {median_ms(rows, 'adaptive'):.0f} ms "
                     f"= {ratio:.2f}x")
    assert ok


SINGLE_CORE = default_workers() < 4


@pytest.mark.xfail(SINGLE_CORE, reason="chunking only rebalances work across cores; see notes on the hub sweep",
                   strict=False)
def test_c5b_group_limit_vs_single_group():
    gen = GenParams(400_000, 60, 1_000_000, skew_exponent=2.0, seed=1, hub_degree=100_000)
    cfg = BenchConfig(gen=gen, group_sizes=(30_000, None), repeats=3, join=JoinConfig(workers=default_workers()))
    fx = _Fixture(cfg)
    rows = benchmark_run("group-size-sweep", cfg, fx)
    fast, slow = median_ms(rows, "m=30000"), median_ms(rows, "m=unlimited")
    ratio = slow / fast
    ok = ratio >= 2.0
    record_criterion("5b m=30000 >= 2x single group (hub 100k)", ok,
                     f"{len(fx.catalog)} rules, workers={cfg.join.workers}, unlimited {slow:.0f} ms / "
                     f"m=30000 {fast:.0f} ms = {ratio:.2f}x")
    assert ok


def test_c6_incremental_advantage(million):
    cfg, fx = million
    cfg = dataclasses.replace(cfg, update_fractions=(0.1,), mode=XCONF)
    rows = benchmark_run("incremental-vs-batch", cfg, fx)
    inc, full = median_ms(rows, "incremental-xconf"), median_ms(rows, "batch")
    ratio = inc / full
    ok = ratio <= 0.5
    record_criterion("6 10% update <= 50% of batch", ok,
                     f"incremental {inc:.0f} ms / batch {full:.0f} ms = {ratio:.1%}")
    assert ok


# -- data-dependent ----------------------------------------------------------------

YAGO = os.environ.get("HORN_DELTA_YAGO")

# (body1, body2, head, template) and expected (stdconf, xconf)
REFERENCE_RULES = [
    (("dealsWith", "imports", "exports", "L3-zx-zy"), (0.06, 0.13)),
    (("influences", "hasGender", "hasGender", "L3-zx-zy"), (0.81, 0.89)),
]


@pytest.mark.skipif(not YAGO, reason="set HORN_DELTA_YAGO to a directory holding kb.tsv and schema.tsv")
def test_c7_reference_rules_on_yago():
    root = Path(YAGO)
    d = Dictionary()
    schema = parse_schema(root / "schema.tsv", d)
    d, facts = ingest_triples(root / "kb.tsv", d)
    catalog = generate_candidates(schema)
    scores = mine_batch(TripleStore(facts), catalog, JoinConfig(workers=default_workers()), "both").scores
    details, ok = [], True
    for (b1, b2, h, t), (std, x) in REFERENCE_RULES:
        rid = next(r.rule_id for r in catalog if (r.template, d.term(r.head), d.term(r.body1),
                                                   d.term(r.body2) if r.body2 is not None else None) == (t, h, b1, b2))
        got = [n / dd if dd else 0.0 for n, dd in (scores["stdconf"].get(rid, (0, 0)), scores["xconf"].get(rid, (0, 0)))]
        ok &= abs(got[0] - std) <= 0.01 and abs(got[1] - x) <= 0.01
        details.append(f"{h}: {got[0]:.3f}/{got[1]:.3f} vs {std}/{x}")
    record_criterion("7 reference rules", ok, "; ".join(details))
    assert ok


# -- sessions --------------------------------------------------------------------

def test_c8_bootstrap_determinism(tmp_path):
    bad = []
    for seed in range(20):
        rng = np.random.default_rng(500 + seed)
        kb = generate_kb(GenParams(300, int(rng.integers(2, 8)), 2500, n_types=int(rng.integers(1, 4)), seed=seed))
        root = kb.write(tmp_path / f"t{seed}")
        rows = kb.triple_lines()
        k = int(rng.integers(2, 7))
        fr = tuple((rng.dirichlet(np.ones(k)) * 0.4).tolist())
        sp = split_indices(len(rows), SplitSpec(0.6, fr, seed))
        (root / "base.tsv").write_text("".join(rows[i] for i in sp.base))
        parts = ["".join(rows[i] for i in b) for b in sp.batches]
        cut = int(rng.integers(1, k))
        batchings = {"each": parts, "regrouped": ["".join(parts[:cut]), "".join(parts[cut:])]}
        mode = MODES[seed % 3]
        finals = []
        for name, texts in batchings.items():
            state = root / f"state-{name}"
            assert main(["mine", "init", "--state", str(state), "--kb", str(root / "base.tsv"),
                         "--schema", str(root / "schema.tsv"), "--mode", mode]) == 0
            for i, text in enumerate(texts):
                f = root / f"{name}-{i}.tsv"
                f.write_text(text)
                assert main(["mine", "update", "--state", str(state), "--batch", str(f)]) == 0
            finals.append((state / "scores.tsv").read_bytes())
        if finals[0] != finals[1]:
            bad.append((seed, mode))
    ok = not bad
    record_criterion("8 batching-invariant sessions", ok, f"20 trials over 3 modes, mismatches={bad}")
    assert ok

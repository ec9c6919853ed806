from collections import Counter

import numpy as np
import pytest

from horndelta.batch import mine_batch
from horndelta.catalog import generate_candidates
from horndelta.engine import (
    MODES,
    EngineConfig,
    IntermediateStore,
    apply_batch,
    bootstrap,
    check_update_search,
    check_update_vanilla,
    check_update_xconf,
    inc_infer,
    infer_update_search,
    infer_update_vanilla,
    infer_update_xconf,
    run_incremental,
)
from horndelta.join import JoinConfig, Predictions, Prediction
from horndelta.keys import pack3
from horndelta.metrics import ConsistencyError, delta_from_counts
from horndelta.store import Facts, TripleStore

from conftest import BROOKLYN_ROWS, KB0_ROWS, oracle_scores

CFG = JoinConfig()


def keys(*preds):
    """Sorted packed (rule, x, y) keys of (rule, x, y) tuples."""
    if not preds:
        return np.zeros(0, dtype=np.int64)
    r, x, y = zip(*preds)
    return np.sort(pack3(r, x, y))


def delta(pair):
    return delta_from_counts(*pair)


# -- inc_infer -----------------------------------------------------------------

def test_inc_infer_batch_fact_as_second_atom(world):
    base = world.store(KB0_ROWS[:2])
    got = inc_infer(base, world.facts(["NYC\tisLocatedIn\tUSA"]), world.catalog(world.r1))
    live, usa = world.id("liveIn"), world.id("USA")
    assert Counter(got) == Counter([Prediction(live, world.id("alice"), usa, 0),
                                    Prediction(live, world.id("carol"), usa, 0)])


def test_inc_infer_both_atoms_from_batch(world):
    got = inc_infer(TripleStore(), world.facts([KB0_ROWS[0], KB0_ROWS[3]]), world.catalog(world.r1))
    assert got.to_list() == [Prediction(world.id("liveIn"), world.id("alice"), world.id("USA"), 0)]


def test_inc_infer_empty_batch(world):
    assert len(inc_infer(world.store(KB0_ROWS), [], world.catalog(world.r1))) == 0


# -- vanilla -------------------------------------------------------------------

def _alice_usa(world):
    return keys((0, world.id("alice"), world.id("USA")))


def test_vanilla_infer_new_prediction(world):
    cat = world.catalog(world.r1)
    base = world.store(KB0_ROWS)
    d, inter = infer_update_vanilla(_alice_usa(world), IntermediateStore.empty(cat.head_array), base)
    assert delta(d) == {0: (1, 1)}
    assert len(inter) == 1


def test_vanilla_infer_known_prediction_is_ignored(world):
    cat = world.catalog(world.r1)
    k = keys((0, world.id("carol"), world.id("USA")))
    inter = IntermediateStore(k, cat.head_array)
    d, after = infer_update_vanilla(k, inter, world.store(KB0_ROWS))
    assert delta(d) == {} and np.array_equal(after.keys, inter.keys)


def test_vanilla_infer_counts_duplicates_once(world):
    cat = world.catalog(world.r1)
    k = _alice_usa(world)
    d, inter = infer_update_vanilla(np.concatenate([k, k]), IntermediateStore.empty(cat.head_array),
                                    world.store(KB0_ROWS))
    assert delta(d) == {0: (1, 1)} and len(inter) == 1


def test_vanilla_infer_unknown_rule(world):
    cat = world.catalog(world.r1)
    with pytest.raises(ConsistencyError):
        infer_update_vanilla(keys((5, 1, 2)), IntermediateStore.empty(cat.head_array), TripleStore())


def test_vanilla_check_head_arrival(world):
    cat = world.catalog(world.r1)
    inter = IntermediateStore(keys((0, world.id("carol"), world.id("USA"))), cat.head_array)
    tau = world.facts(["carol\tliveIn\tUSA"])
    assert delta(check_update_vanilla(tau, inter)) == {0: (1, 0)}
    assert delta(check_update_vanilla(world.facts(["bob\tliveIn\tUSA"]), inter)) == {}


def test_vanilla_check_two_rules_predict_same_fact(world):
    r5 = world.rule("L3-xz-yz", "liveIn", "liveIn", "isLocatedIn")
    cat = world.catalog(world.r1, r5)
    c, usa = world.id("carol"), world.id("USA")
    inter = IntermediateStore(keys((0, c, usa), (1, c, usa)), cat.head_array)
    assert delta(check_update_vanilla(world.facts(["carol\tliveIn\tUSA"]), inter)) == {0: (1, 0), 1: (1, 0)}


# -- search --------------------------------------------------------------------

def test_search_infer_equals_vanilla(world):
    cat = world.catalog(world.r1)
    base = world.store(KB0_ROWS)
    k = _alice_usa(world)
    v, _ = infer_update_vanilla(k, IntermediateStore.empty(cat.head_array), base)
    # base here cannot regenerate alice->USA, so both modes count it
    base_without_path = world.store([KB0_ROWS[0], KB0_ROWS[2]])
    assert delta(infer_update_search(k, base_without_path, cat, CFG)) == delta(v)


def test_search_infer_filters_pre_existing_prediction(world):
    cat = world.catalog(world.r1)
    base = world.store(BROOKLYN_ROWS + ["NYC\tisLocatedIn\tUSA"])
    tau = world.facts(["alice\tliveIn\tNYC"])
    new = inc_infer(base, tau, cat)
    assert len(new) == 1
    assert delta(infer_update_search(np.unique(new.keys()), base, cat, CFG)) == {}
    assert delta(infer_update_search(keys(), base, cat, CFG)) == {}


def test_search_check_head_arrival(world):
    cat = world.catalog(world.r1)
    store = world.store(KB0_ROWS + BROOKLYN_ROWS + ["carol\tliveIn\tUSA"])
    assert delta(check_update_search(world.facts(["carol\tliveIn\tUSA"]), store, cat, CFG)) == {0: (1, 0)}
    # two paths for alice still count one (fact, rule) match
    assert delta(check_update_search(world.facts(["alice\tliveIn\tUSA"]), store, cat, CFG)) == {0: (1, 0)}
    # a head predicate no rule concludes
    assert delta(check_update_search(world.facts(["NYC\tisLocatedIn\tUSA"]), store, cat, CFG)) == {}


# -- xconf ---------------------------------------------------------------------

def test_xconf_infer_counts_paths(world):
    live, a, usa = world.id("liveIn"), world.id("alice"), world.id("USA")
    two = Predictions([0, 0], [a, a], [usa, usa], [live, live])
    assert delta(infer_update_xconf(two, world.store(KB0_ROWS), 1)) == {0: (2, 2)}
    assert delta(infer_update_xconf(two, world.store(KB0_ROWS[:2]), 1)) == {0: (0, 2)}
    assert delta(infer_update_xconf(Predictions.empty(), world.store(KB0_ROWS), 1)) == {}


def test_xconf_check_two_path_head_arrival(world):
    cat = world.catalog(world.r1)
    toronto = ["NYC\tisLocatedIn\tToronto", "Brooklyn\tisLocatedIn\tToronto"]
    tau = world.facts(["alice\tliveIn\tToronto"])
    store = world.store(KB0_ROWS + BROOKLYN_ROWS + toronto + ["alice\tliveIn\tToronto"])
    assert delta(check_update_xconf(tau, store, cat, CFG)) == {0: (2, 0)}
    single = world.store(KB0_ROWS + ["carol\tliveIn\tUSA"])
    assert delta(check_update_xconf(world.facts(["carol\tliveIn\tUSA"]), single, cat, CFG)) == {0: (1, 0)}
    assert delta(check_update_xconf(world.facts(["bob\tliveIn\tNYC"]), single, cat, CFG)) == {}


# -- driver --------------------------------------------------------------------

@pytest.mark.parametrize("mode", MODES)
def test_single_batch_from_empty_equals_batch_miner(world, mode):
    cat = generate_candidates(world.schema)
    facts = world.facts(KB0_ROWS + BROOKLYN_ROWS)
    state, snaps = run_incremental([facts], cat, EngineConfig(mode))
    want = mine_batch(TripleStore(facts), cat, metric=state.config.metric).scores[state.config.metric]
    assert snaps[-1] == want == state.scores


@pytest.mark.parametrize("mode", MODES)
def test_kb0_head_arrives_last(world, mode):
    cat = world.catalog(world.r1)
    base = world.store([KB0_ROWS[0], KB0_ROWS[1], KB0_ROWS[3]])
    state = bootstrap(base, cat, EngineConfig(mode))
    assert state.scores == {0: (0, 2)}
    rep = apply_batch(state, world.facts([KB0_ROWS[2]]))
    assert rep.delta == {0: (1, 0)}
    assert state.scores == {0: (1, 2)}
    assert oracle_scores(world.facts(KB0_ROWS), cat)[state.config.metric] == {0: (1, 2)}


@pytest.mark.parametrize("mode", MODES)
def test_one_batch_vs_singletons(world, mode):
    cat = generate_candidates(world.schema)
    facts = world.facts(KB0_ROWS + BROOKLYN_ROWS)
    one, _ = run_incremental([facts], cat, EngineConfig(mode))
    many, snaps = run_incremental([facts.take([i]) for i in range(len(facts))], cat, EngineConfig(mode))
    assert one.scores == many.scores and len(snaps) == len(facts)
    assert one.scores == oracle_scores(list(facts), cat)[one.config.metric]


def test_kb0_brooklyn_xconf_in_engine(world):
    cat = world.catalog(world.r1)
    state, _ = run_incremental([world.facts(KB0_ROWS), world.facts(BROOKLYN_ROWS)], cat, EngineConfig("xconf"))
    assert state.scores == {0: (2, 3)}


def test_repeated_facts_are_dropped(world):
    cat = world.catalog(world.r1)
    state, _ = run_incremental([world.facts(KB0_ROWS)], cat, EngineConfig("search"))
    rep = apply_batch(state, world.facts(KB0_ROWS))
    assert len(rep.batch) == 0 and rep.delta == {} and state.scores == {0: (1, 2)}

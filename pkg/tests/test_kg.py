import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import hop_soundness_errors, make_kg, random_kg
from ripplerec.kg import (
    RELATIONS, ExtractionConfig, build_all_profiles, build_ripple_profile, click_histories,
    extract_knowledge_graph, read_kg, user_seed, write_kg,
)


def _names(kg):
    return {(kg.entities[h], kg.relations[r], kg.entities[t]) for h, r, t in kg.triples}


def test_item_mapping_rules():
    cats = [0.1] * 10
    cats[1] = 0.8  # sport
    item = {"item_id": "i1", "wikidata_entities_ids": ["Q1", "Q2"], "wikidata_entities_scores": [0.9, 0.7],
            "author": "a1", "bert_category_scores": cats}
    kg = extract_knowledge_graph([item])
    expected = {("item:i1", "mentions_entity", "wd:Q1"), ("item:i1", "mentions_entity", "wd:Q2"),
                ("item:i1", "authored_by", "author:a1"), ("item:i1", "has_category", "cat:sport")}
    expected |= {(t, r + "_inv", h) for h, r, t in expected}
    assert _names(kg) == expected
    assert kg.report.n_forward_triples == 4


def test_thresholds_drop_weak_facts():
    cats = [0.1] * 10
    cats[0] = 0.4
    item = {"item_id": "i1", "wikidata_entities_ids": ["Q1", "Q2"], "wikidata_entities_scores": [0.9, 0.2],
            "bert_category_scores": cats}
    kg = extract_knowledge_graph([item], ExtractionConfig(entity_threshold=0.5))
    assert _names(kg) == {("item:i1", "mentions_entity", "wd:Q1"), ("wd:Q1", "mentions_entity_inv", "item:i1")}


def test_empty_metadata_is_isolated():
    kg = extract_knowledge_graph([{"item_id": "i1"}])
    assert len(kg.triples) == 0
    assert kg.report.isolated_items == 1
    assert kg.item_entity("i1") is not None


def test_shared_topic_gives_two_hop_path():
    items = [{"item_id": "i1", "wikidata_topics": ["T1"]}, {"item_id": "i2", "wikidata_topics": ["T1"]}]
    kg = extract_knowledge_graph(items)
    step1 = kg.triples_from([kg.item_entity("i1")])
    step2 = kg.triples_from(step1[:, 2])
    assert kg.item_entity("i2") in set(step2[:, 2])


def test_kg_round_trip(tmp_path, small_bundle):
    kg = extract_knowledge_graph(small_bundle.items)
    write_kg(kg, tmp_path)
    assert read_kg(tmp_path) == kg
    for r in range(kg.n_relations):
        assert kg.inverse_of(kg.inverse_of(r)) == r


def _chain_kg():
    return make_kg(["item:A", "topic:T1", "item:B", "author:Au1"],
                   [("item:A", "has_topic", "topic:T1"), ("item:B", "has_topic", "topic:T1"),
                    ("item:B", "authored_by", "author:Au1")])


def test_hand_bfs_three_hops():
    kg = _chain_kg()
    p = build_ripple_profile(["A"], kg, n_hop=3, n_memory=1, seed=0)
    e = kg.entity_index
    assert (p.heads[0, 0], p.relations[0, 0], p.tails[0, 0]) == (e["item:A"], RELATIONS.index("has_topic"), e["topic:T1"])
    hop2 = kg.triples_from([p.tails[0, 0]]).tolist()
    assert [p.heads[1, 0], p.relations[1, 0], p.tails[1, 0]] in hop2
    assert p.heads[2, 0] == p.tails[1, 0]
    assert p.depth == 3


def test_empty_history_gives_empty_profile():
    p = build_ripple_profile([], _chain_kg(), 3, 4, seed=0)
    assert p.empty and p.depth == 0
    assert np.all(p.heads == -1)


def test_small_candidate_set_sampled_with_replacement():
    kg = make_kg(["item:A", "wd:X", "wd:Y"], [("item:A", "mentions_entity", "wd:X"),
                                              ("item:A", "mentions_entity", "wd:Y")])
    p = build_ripple_profile(["A"], kg, n_hop=1, n_memory=16, seed=0)
    assert p.heads.shape == (1, 16)
    assert set(p.tails[0]) <= {kg.entity_index["wd:X"], kg.entity_index["wd:Y"]}


def test_dead_end_truncates():
    kg = make_kg(["item:A", "wd:X"], [("item:A", "mentions_entity", "wd:X")])
    kg_one_way = type(kg)(kg.entities, kg.relations, kg.triples[kg.triples[:, 1] == 0])
    p = build_ripple_profile(["A"], kg_one_way, n_hop=3, n_memory=2, seed=0)
    assert p.depth == 1 and p.truncated
    assert len(p.hops[1]) == 0


def test_unknown_items_only():
    p = build_ripple_profile(["zzz"], _chain_kg(), 2, 2, seed=0)
    assert p.empty and p.unknown_items == 1


def test_worker_count_does_not_change_store(small_bundle):
    kg = extract_knowledge_graph(small_bundle.items)
    hist = click_histories(small_bundle)
    one = build_all_profiles(hist, kg, 3, 8, seed=4, n_workers=1)
    many = build_all_profiles(hist, kg, 3, 8, seed=4, n_workers=4)
    assert one == many
    assert len(one) == len(hist)


def test_store_hop_sets_are_full(small_bundle):
    kg = extract_knowledge_graph(small_bundle.items)
    store = build_all_profiles(click_histories(small_bundle), kg, 5, 16, seed=0)
    for i, u in enumerate(store.user_ids):
        for k in range(store.depth[i]):
            assert np.all(store.heads[i, k] >= 0)
        assert np.all(store.heads[i, store.depth[i]:] == -1)
        assert store.get(u) == build_ripple_profile(click_histories(small_bundle)[u], kg, 5, 16,
                                                    user_seed(0, u), u)


def test_max_history_keeps_latest(small_bundle):
    full = click_histories(small_bundle)
    short = click_histories(small_bundle, max_history=2)
    assert all(short[u] == h[-2:] for u, h in full.items())


@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 6))
@settings(max_examples=60, deadline=None)
def test_profiles_are_sound(seed, n_hop, n_memory):
    rng = np.random.default_rng(seed)
    kg = random_kg(rng, int(rng.integers(3, 12)), int(rng.integers(1, 20)))
    items = kg.item_ids()
    history = list(rng.choice(items, size=int(rng.integers(0, len(items) + 1)), replace=False))
    p = build_ripple_profile(history, kg, n_hop, n_memory, seed)
    assert hop_soundness_errors(p, kg, history) == []
    assert build_ripple_profile(history, kg, n_hop, n_memory, seed) == p

from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewshot_slu.corpus import Dataset, parse_tags
from fewshot_slu.episode import (
    Episode,
    EpisodeError,
    EpisodeSeed,
    Stream,
    check_pool_sizes,
    load_episodes,
    map_query_only_slots,
    sample_episode,
    sample_n_way,
    save_episodes,
)

from conftest import make_utt, toy_dataset


def test_n_way_test_phase_uses_all_labels():
    labels = [f"l{i}" for i in range(7)]
    assert sample_n_way(EpisodeSeed(0, 0), "test", labels) == 7
    assert sample_n_way(EpisodeSeed(0, 0), "validation", labels) == 7


def test_n_way_pretrain_degenerate_range():
    assert {sample_n_way(EpisodeSeed(0, i), "pretrain", "abc") for i in range(50)} == {3}
    with pytest.raises(EpisodeError):
        sample_n_way(EpisodeSeed(0, 0), "pretrain", "ab")


def test_n_way_pretrain_uniform():
    labels = [f"l{i}" for i in range(12)]
    counts = Counter(sample_n_way(EpisodeSeed(3, i), "pretrain", labels) for i in range(100_000))
    assert set(counts) == set(range(3, 13))
    for n in range(3, 13):
        assert abs(counts[n] / 100_000 - 0.1) <= 0.01


def test_sample_episode_sizes_and_disjointness():
    data = toy_dataset(intents=tuple("abcde"), per_intent=20)
    ep = sample_episode(EpisodeSeed(0, 0), data, "test", 10, 10)
    assert sorted(ep.intents) == list("abcde")
    for intent in ep.intents:
        assert len(ep.support[intent]) == 10 and len(ep.query[intent]) == 10
        s = {u.id for u in ep.support[intent]}
        q = {u.id for u in ep.query[intent]}
        assert not s & q
        # pool holds exactly k_s + k_q, so everything is used
        assert s | q == set(data.by_intent[intent])
        assert all(u.intent == intent for u in ep.support[intent] + ep.query[intent])


def test_sample_episode_deterministic_and_order_independent():
    data = toy_dataset()
    a = sample_episode(EpisodeSeed(5, 7), data, "pretrain", 3, 2)
    for i in range(5):
        sample_episode(EpisodeSeed(5, i), data, "pretrain", 3, 2)
    b = sample_episode(EpisodeSeed(5, 7), data, "pretrain", 3, 2)
    assert a == b
    assert a.query_ids() == b.query_ids()


def test_sample_episode_short_pool_names_intent():
    data = toy_dataset(per_intent=15)
    with pytest.raises(EpisodeError, match="has 15 utterances, needs 20"):
        sample_episode(EpisodeSeed(0, 0), data, "test", 10, 10)
    assert check_pool_sizes(data, 20) == {"a": 5, "b": 5, "c": 5}


def test_streams_are_independent():
    seed = EpisodeSeed(1, 2)
    draws = {s: seed.rng(s).random() for s in Stream}
    assert len(set(draws.values())) == len(Stream)
    assert seed.rng(Stream.PERTURB).random() == draws[Stream.PERTURB]


def _episode(support, query):
    return map_query_only_slots(
        Episode(EpisodeSeed(0, 0), ("a",), {"a": tuple(support)}, {"a": tuple(query)}, len(support), len(query))
    )


def test_query_only_slot_becomes_other():
    ep = _episode(
        [make_utt("s", "a", "to boston", "O B-city")],
        [make_utt("q", "a", "on monday", "O B-date")],
    )
    assert ep.support_slot_inventory == {"city"}
    assert ep.query["a"][0].slots == parse_tags(["O", "O"])


def test_query_mapping_chunks_map_wholesale():
    ep = _episode(
        [make_utt("s", "a", "to boston", "O B-city")],
        [make_utt("q", "a", "next monday paris", "B-date I-date B-city")],
    )
    assert ep.query["a"][0].slots == parse_tags(["O", "O", "B-city"])


def test_query_mapping_identity_and_idempotent():
    ep = _episode(
        [make_utt("s", "a", "to boston", "O B-city")],
        [make_utt("q", "a", "to paris", "O B-city")],
    )
    assert ep.query == ep.raw_query
    assert map_query_only_slots(map_query_only_slots(ep)) == ep


def test_episode_cache_round_trip(tmp_path):
    data = toy_dataset()
    eps = [sample_episode(EpisodeSeed(0, i), data, "test", 4, 3) for i in range(3)]
    save_episodes(eps, tmp_path / "e.jsonl")
    assert load_episodes(tmp_path / "e.jsonl") == eps


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 1000), st.integers(1, 8), st.integers(1, 8))
def test_sampling_invariants(run_seed, index, k_s, k_q):
    data = toy_dataset(intents=tuple("abcd"), per_intent=16)
    ep = sample_episode(EpisodeSeed(run_seed, index), data, "pretrain", k_s, k_q)
    assert 3 <= len(ep.intents) <= 4
    for intent in ep.intents:
        assert len(ep.support[intent]) == k_s and len(ep.query[intent]) == k_q
        assert not {u.id for u in ep.support[intent]} & {u.id for u in ep.query[intent]}
    inv = ep.support_slot_inventory
    assert all(t.is_other or t.slot_type in inv for u in ep.query_utterances() for t in u.slots)


def test_empty_pool_dataset():
    with pytest.raises(EpisodeError):
        sample_episode(EpisodeSeed(0, 0), Dataset(()), "pretrain", 1, 1)

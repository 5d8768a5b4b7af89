import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewshot_slu.corpus import Dataset, is_bio_valid, parse_tags
from fewshot_slu.episode import Episode, EpisodeSeed, map_query_only_slots, sample_episode
from fewshot_slu.perturb import (
    Op,
    PerturbationSpec,
    PerturbError,
    alignment_cost,
    align_tokens,
    apply_modality_mismatch,
    apply_perturbation,
    load_hypotheses,
    project_slots,
    project_utterance,
    remove_examples,
    replace_examples,
    save_hypotheses,
    word_error_rate,
)

from conftest import make_utt, toy_dataset
from oracles import lev


def test_spec_parse_and_name():
    spec = PerturbationSpec.parse("remove:2")
    assert spec == PerturbationSpec("remove", 2) and spec.name == "remove2"
    with pytest.raises(PerturbError):
        PerturbationSpec.parse("shuffle:1")
    with pytest.raises(PerturbError):
        PerturbationSpec("remove", -1)


@pytest.fixture
def episode():
    data = toy_dataset(per_intent=30)
    return data, sample_episode(EpisodeSeed(0, 3), data, "test", 10, 10)


def test_remove_one(episode):
    data, ep = episode
    out = remove_examples(ep, 1)
    for intent in ep.intents:
        assert len(out.support[intent]) == 9
        assert {u.id for u in out.support[intent]} < {u.id for u in ep.support[intent]}
    assert out.raw_query == ep.raw_query and out.seed == ep.seed
    assert remove_examples(ep, 1) == out


def test_remove_zero_and_too_many(episode):
    _, ep = episode
    assert remove_examples(ep, 0) is ep
    with pytest.raises(PerturbError):
        remove_examples(ep, 10)


def test_remove_recomputes_query_mapping():
    support = [make_utt("s1", "a", "on monday", "O B-date"), make_utt("s2", "a", "to rome", "O B-city")]
    query = [make_utt("q", "a", "rome monday", "B-city B-date")]
    ep = map_query_only_slots(
        Episode(EpisodeSeed(0, 0), ("a",), {"a": tuple(support)}, {"a": tuple(query)}, 2, 1)
    )
    assert ep.query["a"][0].slots == parse_tags(["B-city", "B-date"])
    for i in range(20):
        out = remove_examples(ep, 1, EpisodeSeed(0, i))
        if out.support["a"][0].id == "s2":
            break
    assert out.query["a"][0].slots == parse_tags(["B-city", "O"])
    assert out.query_ids() == ep.query_ids()


def test_replace_three(episode):
    data, ep = episode
    out = replace_examples(ep, 3, None, data)
    for intent in ep.intents:
        before = {u.id for u in ep.support[intent]}
        after = {u.id for u in out.support[intent]}
        used = before | {u.id for u in ep.raw_query[intent]}
        assert len(out.support[intent]) == 10
        assert len(after - before) == 3
        assert not (after - before) & used
        assert all(u.intent == intent for u in out.support[intent])
    assert out.query_ids() == ep.query_ids()
    assert replace_examples(ep, 0, None, data) is ep


def test_replace_short_pool(episode):
    data, ep = episode
    intent = ep.intents[0]
    used = {u.id for u in ep.support[intent] + ep.raw_query[intent]}
    spare = [i for i in data.by_intent[intent] if i not in used][:2]
    pool = Dataset(tuple(data[i] for i in sorted(used) + spare))
    with pytest.raises(PerturbError, match=f"{intent!r} has 2 spare"):
        replace_examples(ep, 3, None, pool)


def test_apply_perturbation_dispatch(episode):
    data, ep = episode
    assert apply_perturbation(ep, PerturbationSpec("remove", 2), data) == remove_examples(ep, 2)
    assert apply_perturbation(ep, PerturbationSpec("replace", 2), data) == replace_examples(ep, 2, None, data)


def test_align_identity():
    ops = align_tokens("a b c".split(), "a b c".split())
    assert [o.kind for o in ops] == ["match"] * 3 and alignment_cost(ops) == 0


def test_align_deletion():
    ops = align_tokens(["show", "me", "flights"], ["show", "flights"])
    assert ops == [Op("match", 0, 0), Op("del", 1, None), Op("match", 2, 1)]
    assert alignment_cost(ops) == 1


def test_align_sub_then_insert():
    ops = align_tokens(["to", "boston"], ["to", "bossed", "in"])
    assert ops == [Op("match", 0, 0), Op("sub", 1, 1), Op("ins", None, 2)]
    assert alignment_cost(ops) == 2


def test_align_cost_matches_recursive_oracle_small():
    seqs = [s for k in range(5) for s in itertools.product("abc", repeat=k)]
    for a in seqs:
        for b in seqs:
            assert alignment_cost(align_tokens(a, b)) == lev(a, b)


def test_project_identity():
    tags = parse_tags(["O", "B-city", "I-city"])
    assert project_slots(tags, align_tokens("a b c".split(), "a b c".split())) == tags


def test_project_delete_repairs_inside():
    tags = parse_tags(["B-city", "I-city"])
    ops = [Op("del", 0, None), Op("match", 1, 0)]
    assert project_slots(tags, ops) == parse_tags(["B-city"])


def test_project_insert_bridges_chunk():
    tags = parse_tags(["B-city", "I-city"])
    ops = align_tokens(["new", "york"], ["new", "uh", "york"])
    assert project_slots(tags, ops) == parse_tags(["B-city", "I-city", "I-city"])


def test_project_insert_outside_chunk_is_other():
    tags = parse_tags(["B-city", "O"])
    ops = align_tokens(["boston", "please"], ["boston", "uh", "please"])
    assert project_slots(tags, ops) == parse_tags(["B-city", "O", "O"])
    # chunk boundary: B-city followed by B-city is two chunks, no bridge
    tags = parse_tags(["B-city", "B-city"])
    ops = align_tokens(["rome", "paris"], ["rome", "uh", "paris"])
    assert project_slots(tags, ops) == parse_tags(["B-city", "O", "B-city"])


tokens = st.lists(st.sampled_from("abcd"), min_size=1, max_size=7)
tags = st.sampled_from(["O", "B-x", "I-x", "B-y", "I-y"])


@settings(max_examples=300, deadline=None)
@given(st.data())
def test_projection_properties(data):
    ref = data.draw(tokens)
    hyp = data.draw(tokens)
    ref_tags = data.draw(st.lists(tags, min_size=len(ref), max_size=len(ref)))
    out = project_slots(parse_tags(ref_tags), align_tokens(ref, hyp))
    assert len(out) == len(hyp) and is_bio_valid(out)


@settings(max_examples=200, deadline=None)
@given(tokens, tokens)
def test_alignment_ops_are_consistent(ref, hyp):
    ops = align_tokens(ref, hyp)
    assert [o.ref for o in ops if o.ref is not None] == list(range(len(ref)))
    assert [o.hyp for o in ops if o.hyp is not None] == list(range(len(hyp)))
    for o in ops:
        if o.kind == "match":
            assert ref[o.ref] == hyp[o.hyp]
        if o.kind == "sub":
            assert ref[o.ref] != hyp[o.hyp]


def test_modality_mismatch(episode):
    data, ep = episode
    identity = {u.id: u.tokens for u in data}
    assert apply_modality_mismatch(ep, identity) == ep

    target = ep.raw_query[ep.intents[0]][0]
    hyps = dict(identity)
    hyps[target.id] = target.tokens[1:] if len(target.tokens) > 1 else target.tokens + ("uh",)
    out = apply_modality_mismatch(ep, hyps)
    new = out.raw_query[ep.intents[0]][0]
    assert new.tokens == hyps[target.id]
    assert new.slots == project_utterance(target, hyps[target.id]).slots
    assert out.support == ep.support and out.query_ids() == ep.query_ids()

    del hyps[target.id]
    with pytest.raises(PerturbError, match=target.id):
        apply_modality_mismatch(ep, hyps)


def test_hypothesis_file_and_wer(tmp_path):
    ds = Dataset((make_utt("1", "a", "show me flights"), make_utt("2", "a", "to boston")))
    save_hypotheses({"1": ("show", "flights")}, tmp_path / "h.jsonl")
    hyps = load_hypotheses(tmp_path / "h.jsonl")
    assert hyps == {"1": ("show", "flights")}
    wer, missing = word_error_rate(ds, hyps)
    assert wer == pytest.approx(1 / 3) and missing == ["2"]
    (tmp_path / "bad.jsonl").write_text('{"id": "1"}\n')
    with pytest.raises(PerturbError, match=":1:"):
        load_hypotheses(tmp_path / "bad.jsonl")

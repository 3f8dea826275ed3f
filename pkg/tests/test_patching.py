import pytest
from hypothesis import given, settings, strategies as st

from cltprobe.patching import (FactPair, PatchError, PatchResult, aligned_positions, block_gradient,
                               block_patch, default_blocks, factual_routing, kl_separation, pair_from_text,
                               screen_gold_pairs)


def pairs(fact):
    return [FactPair.from_fixture(d) for d in fact.circuit["pairs"]]


def test_pair_from_text(fact):
    tpl = fact.circuit["templates"][0]
    item = {"prompt": tpl.format(" Paris"), "subject": "Paris", "answer": "France",
            "cf_prompt": tpl.format(" Berlin"), "cf_subject": " Berlin", "cf_answer": " Germany"}
    p = pair_from_text(item, fact.vocab)
    assert p == FactPair.from_fixture(dict(fact.circuit["pairs"][0], template=p.label))
    assert fact.vocab.decode(p.prompt_original[p.subject_span[0]:p.subject_span[1]]) == " Paris"
    bad = dict(item, subject=" Rome")
    with pytest.raises(ValueError):
        pair_from_text(bad, fact.vocab)


def test_span_validation():
    with pytest.raises(PatchError):
        FactPair((0, 1, 2), (0, 1, 2), (2, 5), 1, 2)
    with pytest.raises(PatchError):
        FactPair((0, 1, 2), (0, 1, 2), (1, 1), 1, 2)


def test_aligned_positions_end_aligned():
    p = FactPair((0, 5, 6, 7, 9), (0, 8, 7, 9, 9), (1, 3), 1, 2, cf_subject_span=(1, 2))
    assert aligned_positions(p, "subject") == [(2, 1)]
    assert aligned_positions(p, "template") == [(3, 3)]
    with pytest.raises(PatchError):
        aligned_positions(p, "everything")
    uneven = FactPair((0, 5, 6), (0, 5, 6, 7), (1, 2), 1, 2)
    with pytest.raises(PatchError):
        aligned_positions(uneven, "template")


def test_gold_screen_keeps_correct_pairs(fact):
    ps = pairs(fact)
    assert screen_gold_pairs(ps, fact.model) == ps
    wrong = FactPair(ps[0].prompt_original, ps[0].prompt_counterfactual, ps[0].subject_span,
                     ps[0].answer_counterfactual, ps[0].answer_original)
    assert screen_gold_pairs([wrong], fact.model) == []


def test_block_gradient_on_fixture(fact):
    g = block_gradient(pairs(fact), fact.model, [tuple(b) for b in fact.circuit["blocks"]])
    assert g.subject_rates == [1.0, 0.0, 0.0]
    assert g.template_rates == [0.0, 0.0, 0.0]
    d = g.to_dict()
    assert d["n_pairs"] == 5 and len(d["results"]) == 30


def test_patch_result_invariant():
    with pytest.raises(AssertionError):
        PatchResult((0, 1), "subject", changed=False, exact_flip=True, kl=0.0)


def test_default_blocks():
    assert default_blocks(16) == [(0, 3), (4, 7), (8, 11), (12, 15)]
    assert default_blocks(6, 4) == [(0, 3), (4, 5)]


def test_block_outside_model(fact):
    with pytest.raises(PatchError):
        block_patch(pairs(fact)[0], (4, 9), "subject", fact.model)


def test_kl_separation_groups():
    r = lambda ch, kl: PatchResult((0, 0), "subject", ch, False, kl)
    sep = kl_separation([r(True, 0.4), r(True, 0.5), r(False, 0.005)])
    assert sep["mean_changed"] == pytest.approx(0.45) and sep["ratio"] == pytest.approx(90)
    assert kl_separation([r(False, 0.1)])["mean_changed"] is None


def test_factual_routing_finds_router(fact):
    out = factual_routing(pairs(fact), fact.model, [tuple(b) for b in fact.circuit["blocks"]])
    l, h = fact.circuit["router_head"]
    top = out["heads"][0]
    assert top["head"] == f"L{l}:H{h}" and top["appearance_rate"] == 1.0
    assert top["negative_fraction"] == 1.0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 4), st.integers(0, 2))
def test_self_patch_is_a_no_op(fact, which, block):
    p = pairs(fact)[which]
    me = FactPair(p.prompt_original, p.prompt_original, p.subject_span, p.answer_original,
                  p.answer_counterfactual)
    b = tuple(fact.circuit["blocks"][block])
    for pos in ("subject", "template"):
        res = block_patch(me, b, pos, fact.model)
        assert not res.changed and res.kl <= 1e-6

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cltprobe.model import forward, next_token_distribution
from cltprobe.steering import (CLT_METHODS, METHODS, SteeringConfig, attractor_absorption, contrastive_vector,
                               run_baseline_method, within_group_kl)


def fact_prompts(fact):
    return [p["prompt"] for p in fact.circuit["pairs"]], [p["cf_prompt"] for p in fact.circuit["pairs"]]


def test_contrastive_vector_is_mean_difference(fact):
    orig, cf = fact_prompts(fact)
    v = contrastive_vector(fact.model, cf, orig, 1)
    r = lambda ps: np.mean([forward(fact.model, p).residual_post[1, -1] for p in ps], axis=0)
    assert np.allclose(v.direction, r(cf) - r(orig), atol=1e-5)
    assert v.norm == pytest.approx(float(np.linalg.norm(v.direction)))


def test_contrastive_steering_has_a_threshold(fact):
    orig, cf = fact_prompts(fact)
    v = contrastive_vector(fact.model, cf, orig, 1)
    cfg = SteeringConfig("contrastive_vector", orig, "Germany", [0.0, 0.2, 0.35, 0.6, 1.0], layer=1, direction=v)
    out = run_baseline_method(cfg, fact.model, fact.vocab)
    hits = {s: all(o.target_hit for o in out if o.strength == s) for s in cfg.strengths}
    assert hits == {0.0: False, 0.2: False, 0.35: False, 0.6: True, 1.0: True}


def test_activation_patch_at_last_layer_reproduces_donor(fact):
    orig, cf = fact_prompts(fact)
    L = fact.model.spec.n_layers
    cfg = SteeringConfig("activation_patch", [orig[0]], "Germany", [1.0], layer=L - 1, donor_prompt=cf[0])
    (o,) = run_baseline_method(cfg, fact.model, fact.vocab)
    p_donor = next_token_distribution(forward(fact.model, cf[0]))[fact.vocab.id_of(" Germany")]
    assert o.target_hit and o.p_target == pytest.approx(float(p_donor), rel=1e-4)


@pytest.mark.parametrize("method", CLT_METHODS)
def test_clt_methods_run_on_planted(planted, method):
    prompt = planted.vocab.encode(planted.circuit["prompts"]["natural"])
    cfg = SteeringConfig(method, [prompt], planted.circuit["target_word"], [0.0, 10.0])
    out = run_baseline_method(cfg, planted.model, planted.vocab, planted.clt)
    assert len(out) == 2 and out[0].strength == 0.0 and not out[0].target_hit
    assert out[0].natural_logit_drop == 0.0
    if out[1].feature is None:
        # nothing passed the cosine filter: the method leaves the run untouched
        assert method in ("cosine_filtered_inject", "multi_layer_clamp")
        assert out[1].p_target == out[0].p_target


def test_config_validation(planted):
    prompt = planted.vocab.encode(planted.circuit["prompts"]["natural"])
    with pytest.raises(ValueError):
        run_baseline_method(SteeringConfig("nope", [prompt], "around"), planted.model, planted.vocab)
    with pytest.raises(ValueError):
        run_baseline_method(SteeringConfig("decoder_dot", [prompt], "around"), planted.model, planted.vocab)
    with pytest.raises(ValueError):
        run_baseline_method(SteeringConfig("contrastive_vector", [prompt], "around"), planted.model,
                            planted.vocab)
    assert len(METHODS) == 7


def test_absorption_profile(fact):
    orig, cf = fact_prompts(fact)
    v = contrastive_vector(fact.model, cf, orig, 1)
    res = attractor_absorption(v, [0.0, 0.2, 0.5], fact.model, orig[0], k=1)
    assert res.absorption[0] is None
    assert res.absorption[1] > 0.9 and res.absorption[2] < 0.5 and res.threshold == 0.5
    with pytest.raises(ValueError):
        attractor_absorption(v, [0.5, 0.2], fact.model, orig[0])
    with pytest.raises(ValueError):
        attractor_absorption(v, [0.5], fact.model, orig[0], k=10)


def test_within_group_kl(planted, fact):
    enc = planted.vocab.encode
    same = [enc(t) for t in planted.circuit["prompts"]["variants"]]
    assert within_group_kl(same, planted.model) < 0.02
    orig, cf = fact_prompts(fact)
    assert within_group_kl([orig[0], cf[0]], fact.model) > 1.0
    with pytest.raises(ValueError):
        within_group_kl(same[:1], planted.model)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 0.3))
def test_sub_threshold_perturbations_are_absorbed(fact, scale):
    orig, cf = fact_prompts(fact)
    v = contrastive_vector(fact.model, cf, orig, 1)
    res = attractor_absorption(v, [scale], fact.model, orig[0], k=1)
    assert res.absorption[0] >= 0.9

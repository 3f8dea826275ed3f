import numpy as np
import pytest

from cltprobe.fixtures import (FactFixtureSpec, FixtureBundle, FixtureError, PlantedCircuitSpec,
                               build_fact_fixture, build_planted_model, default_geometry, planted_edits)
from cltprobe.model import forward, next_token_distribution
from cltprobe.oracle import oracle_distribution


def test_planted_natural_answer_is_the_competing_word(planted):
    m = planted.manifest
    c = planted.circuit
    assert m["natural_top1"] == c["competing_token"]
    assert m["p_target_clean"] < 1e-3 and m["p_target_spike"] > 0.99
    assert planted.vocab.surface(c["target_token"]).strip() == c["target_word"]


def test_manifest_is_oracle_exact(planted):
    toks = planted.manifest["prompt_tokens"]
    p = oracle_distribution(planted.model, toks, planted_edits(planted, toks))
    assert p[planted.circuit["target_token"]] == pytest.approx(planted.manifest["p_target_spike"], rel=1e-12)


def test_float32_engine_tracks_manifest(planted):
    toks = planted.manifest["prompt_tokens"]
    p = next_token_distribution(forward(planted.model, toks, planted_edits(planted, toks)))
    assert p[planted.circuit["target_token"]] == pytest.approx(planted.manifest["p_target_spike"], abs=1e-5)


def test_builds_are_deterministic(tmp_path):
    a = build_planted_model().save(tmp_path / "a.json")
    b = build_planted_model().save(tmp_path / "b.json")
    da, db = (FixtureBundle.load(p) for p in (a, b))
    assert np.array_equal(da.model.W_E, db.model.W_E)
    assert (tmp_path / "a.model.safetensors").read_bytes() == (tmp_path / "b.model.safetensors").read_bytes()
    assert (tmp_path / "a.clt.safetensors").read_bytes() == (tmp_path / "b.clt.safetensors").read_bytes()


def test_bundle_roundtrip_preserves_behaviour(tmp_path, planted):
    path = planted.save(tmp_path / "p.json")
    back = FixtureBundle.load(path)
    assert back.kind == planted.kind and back.circuit == planted.circuit
    toks = planted.manifest["prompt_tokens"]
    assert np.array_equal(forward(back.model, toks).logits, forward(planted.model, toks).logits)


def test_load_rejects_other_json(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"hello": 1}')
    with pytest.raises(FixtureError):
        FixtureBundle.load(p)


def test_overridable_differs_only_after_routing(planted, overridable):
    rl = planted.circuit["routing_head"][0]
    for name, arr in planted.model.params.items():
        if name.startswith("blocks.") and int(name.split(".")[1]) > rl:
            continue
        assert np.array_equal(arr, overridable.model.params[name]), name


def test_spec_validation():
    with pytest.raises(FixtureError):
        build_planted_model(PlantedCircuitSpec(geometry=default_geometry(d_model=28)))
    with pytest.raises(FixtureError):
        PlantedCircuitSpec(plan_layer=2, commitment_layer=2)
    with pytest.raises(FixtureError):
        PlantedCircuitSpec(routing_head=(5, 1), overridable=True)
    with pytest.raises(FixtureError):
        FactFixtureSpec(basin_threshold=0.7)
    with pytest.raises(FixtureError):
        FactFixtureSpec(geometry=default_geometry())


def test_fact_answers(fact):
    for pr in fact.circuit["pairs"]:
        assert int(np.argmax(forward(fact.model, pr["prompt"]).logits[-1])) == pr["answer"]
        assert int(np.argmax(forward(fact.model, pr["cf_prompt"]).logits[-1])) == pr["cf_answer"]
    assert fact.manifest["p_answer_original"] > 0.9


@pytest.mark.parametrize("threshold", [0.25, 0.3])
def test_fact_threshold_is_configurable(threshold):
    from cltprobe.steering import attractor_absorption, contrastive_vector
    b = build_fact_fixture(FactFixtureSpec(basin_threshold=threshold))
    ps = b.circuit["pairs"]
    v = contrastive_vector(b.model, [p["cf_prompt"] for p in ps], [p["prompt"] for p in ps], 1)
    scales = [round(0.05 * i, 2) for i in range(1, 12)]
    res = attractor_absorption(v, scales, b.model, ps[0]["prompt"], k=1)
    assert abs(res.threshold - threshold) <= 0.2 * threshold

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import binomtest

from _support import planted_correction_config, planted_sweep_config
from cltprobe.discovery import parse_cmu
from cltprobe.planning import (AblationConfig, CorrectionPoint, classify_correction, clopper_pearson,
                               last_word, layer_ablation, localization_rate, one_sided_upper, position_sweep,
                               rhymes, strength_sweep, summarize_sweep, wald_interval, word_probability)


def test_clopper_pearson_matches_scipy_binomtest():
    for k, n in [(95, 136), (0, 10), (10, 10), (3, 17)]:
        ci = binomtest(k, n).proportion_ci(0.95, method="exact")
        lo, hi = clopper_pearson(k, n)
        assert lo == pytest.approx(ci.low, abs=1e-12) and hi == pytest.approx(ci.high, abs=1e-12)


def test_localization_intervals():
    s = localization_rate(95, 136)
    assert s.rate == pytest.approx(95 / 136)
    assert (round(s.ci_low, 2), round(s.ci_high, 2)) == (0.62, 0.78)
    assert (round(s.exact_low, 3), round(s.exact_high, 3)) == (0.614, 0.774)
    # 0/10: one-sided exact bound is 1 - 0.05 ** (1/10)
    assert localization_rate(0, 10).upper_one_sided == pytest.approx(1 - 0.05 ** 0.1, abs=1e-12)
    with pytest.raises(ValueError):
        localization_rate(11, 10)


def test_wald_clips():
    assert wald_interval(0, 5) == (0.0, 0.0)
    assert wald_interval(5, 5) == (1.0, 1.0)


def test_summarize_strict_argmax():
    r = summarize_sweep([0.1, 0.5, 0.5], 0.1, 2)
    assert not r.localized and r.peak_position == 1
    r = summarize_sweep([0.1, 0.2, 0.9], 0.001, 2)
    assert r.localized and r.ratio == pytest.approx(900)
    assert summarize_sweep([0.0, 0.1], 0.0, 1).ratio > 1e20


def test_localization_from_results():
    rs = [summarize_sweep([0.1, 0.9], 0.1, 1), summarize_sweep([0.9, 0.1], 0.1, 1)]
    s = localization_rate(rs)
    assert (s.k, s.n) == (1, 2)


def test_sweep_matches_oracle_manifest(planted):
    res = position_sweep(planted_sweep_config(planted), planted.model, planted.clt, planted.vocab)
    assert np.allclose(res.p_by_position, planted.manifest["p_by_position"], atol=1e-6)
    assert res.baseline_p == pytest.approx(planted.manifest["p_target_suppressed"], rel=1e-3)


def test_clean_baseline_and_moving_suppression(planted):
    cfg = planted_sweep_config(planted, baseline="clean")
    res = position_sweep(cfg, planted.model, planted.clt, planted.vocab)
    assert res.baseline_p == pytest.approx(planted.manifest["p_target_clean"], rel=1e-3)
    moved = position_sweep(planted_sweep_config(planted, move_suppression=True), planted.model,
                           planted.clt, planted.vocab)
    assert moved.localized and moved.p_by_position[-1] == pytest.approx(res.p_by_position[-1])


def test_sweep_config_validation(planted):
    with pytest.raises(ValueError):
        planted_sweep_config(planted, strength=-1.0)
    with pytest.raises(ValueError):
        planted_sweep_config(planted, planning_site=99)
    with pytest.raises(ValueError):
        position_sweep(planted_sweep_config(planted, target_word="zebra"), planted.model, planted.clt,
                       planted.vocab)


def test_strength_sweep_monotone_and_routed(planted):
    pts = strength_sweep(planted_sweep_config(planted), planted.model, planted.clt, planted.vocab,
                         [0, 1, 2, 4, 6, 8, 10, 15])
    ps = [p.p_target for p in pts]
    assert ps[0] == pytest.approx(planted.manifest["p_target_clean"], rel=1e-3)
    assert all(b >= a - 1e-9 for a, b in zip(ps, ps[1:]))
    assert pts[-1].top_head == "L4:H1"
    with pytest.raises(ValueError):
        strength_sweep(planted_sweep_config(planted), planted.model, planted.clt, planted.vocab, [1, 2])


def test_layer_ablation_commitment_layers(planted):
    pron = parse_cmu(planted.cmu)
    prompts = tuple(planted.circuit["prompts"]["couplets"])
    full = layer_ablation(AblationConfig(prompts, frozenset()), planted.model, planted.vocab, pron)
    cut = layer_ablation(AblationConfig(prompts, frozenset(planted.circuit["commitment_layers"])),
                         planted.model, planted.vocab, pron)
    assert full.rhyme_rate == 1.0 and cut.rhyme_rate == 0.0


def test_rhyme_helpers(planted):
    pron = parse_cmu(planted.cmu)
    assert last_word(" the cat ran about,") == "about"
    assert last_word("...") is None
    assert rhymes("about", "out", pron) and not rhymes("out", "out", pron)
    assert not rhymes("about", "around", pron) and not rhymes("about", None, pron)


def test_correction_verdicts(planted, overridable):
    from cltprobe.planning import correction_test
    a = correction_test(planted_correction_config(planted), planted.model, planted.clt, planted.vocab)
    assert a.verdict == "irrevocable" and a.key_head == "L4:H1"
    assert [p.strength for p in a.points] == [0, 1, 2, 5, 10, 15, 20]
    b = correction_test(planted_correction_config(overridable), overridable.model, overridable.clt,
                        overridable.vocab)
    assert b.verdict == "overridable"


def test_classify_disrupted():
    pts = [CorrectionPoint(0.0, 0.8, 0.01, 0.1, 0.1), CorrectionPoint(5.0, 0.3, 0.02, 0.1, 0.1)]
    assert classify_correction(pts) == "disrupted"
    pts[1] = CorrectionPoint(5.0, 0.3, 0.2, 0.1, 0.1)
    assert classify_correction(pts) == "overridable"


def test_correction_layers_must_follow_commitment(planted):
    cfg = planted_correction_config(planted)
    with pytest.raises(ValueError):
        type(cfg)(cfg.prompt, cfg.commit_edits, cfg.commit_word, cfg.correct_feature, (2, 5),
                  cfg.correct_word)


def test_word_probability_takes_max_variant():
    assert word_probability(np.array([0.1, 0.6, 0.3]), [0, 2]) == pytest.approx(0.3)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 400).flatmap(lambda n: st.tuples(st.integers(0, n), st.just(n))))
def test_interval_properties(kn):
    k, n = kn
    s = localization_rate(k, n)
    assert 0 <= s.exact_low <= s.rate <= s.exact_high <= 1
    assert 0 <= s.ci_low <= s.rate <= s.ci_high <= 1
    assert s.exact_high <= 1 and s.upper_one_sided <= s.exact_high + 1e-12
    assert one_sided_upper(k, n, 0.99) >= s.upper_one_sided - 1e-12


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=10), st.data())
def test_localized_iff_unique_max_at_site(ps, data):
    site = data.draw(st.integers(0, len(ps) - 1))
    r = summarize_sweep(ps, 0.5, site)
    assert r.localized == (ps[site] == max(ps) and ps.count(max(ps)) == 1)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cltprobe.fixtures import planted_edits
from cltprobe.model import Capture, ForwardTrace, forward
from cltprobe.routing import (HeadDelta, RoutingReport, cross_task_overlap, head_name, parse_head,
                              recurring_heads, routing_analysis, suppress_amplification)

PLANNING_RECURRING = ["L11:H0", "L6:H12", "L9:H13", "L5:H17", "L6:H24"]
FACTUAL_TOP10 = ["L15:H8", "L14:H27", "L15:H16", "L14:H26", "L10:H30", "L13:H20", "L13:H2", "L11:H18",
                 "L14:H17", "L9:H4"]


def fake_trace(att: np.ndarray) -> ForwardTrace:
    return ForwardTrace(tokens=np.zeros(att.shape[-1], dtype=np.int64), captured=Capture.ATTENTION,
                        attention=att)


def report_from(deltas: dict[tuple[int, int], float], L=4, H=4) -> RoutingReport:
    base = np.full((L, H, 3, 3), 0.0)
    steer = base.copy()
    for (l, h), d in deltas.items():
        steer[l, h, -1, 1] = d
    return routing_analysis(fake_trace(base), fake_trace(steer), 1)


def test_parse_and_name():
    assert parse_head("L11:H0") == (11, 0) and parse_head((3, 2)) == (3, 2)
    assert head_name(21, 5) == "L21:H5"
    with pytest.raises(ValueError):
        parse_head("L11-H0")


def test_ranking_by_abs_delta_then_position():
    rep = report_from({(2, 1): -0.5, (1, 0): 0.5, (3, 3): 0.2})
    assert [h.name for h in rep.top_k[:3]] == ["L1:H0", "L2:H1", "L3:H3"]
    assert rep.total_shift == pytest.approx(1.2)


def test_planted_competing_head_has_negative_delta(planted):
    toks = planted.vocab.encode(planted.circuit["prompts"]["natural"])
    clean = forward(planted.model, toks)
    rep = routing_analysis(clean, forward(planted.model, toks, planted_edits(planted, toks)), len(toks) - 1)
    l, h = planted.circuit["competing_head"]
    comp = rep.delta_of(l, h)
    assert comp.delta < 0
    assert comp.delta == pytest.approx(planted.manifest["competing_head_delta"], abs=1e-4)
    assert rep.top_k[0].delta == pytest.approx(planted.manifest["routing_head_delta"], abs=1e-4)


def test_suppression_amplifies_routing(planted):
    toks = planted.vocab.encode(planted.circuit["prompts"]["natural"])
    site = len(toks) - 1
    clean = forward(planted.model, toks)
    full = routing_analysis(clean, forward(planted.model, toks, planted_edits(planted, toks)), site)
    only = routing_analysis(clean, forward(planted.model, toks, planted_edits(planted, toks, suppress=False)),
                            site)
    assert suppress_amplification(only, full) > 1.0


def test_shape_and_site_errors():
    a = fake_trace(np.zeros((2, 2, 3, 3)))
    with pytest.raises(ValueError):
        routing_analysis(a, fake_trace(np.zeros((2, 2, 4, 4))), 1)
    with pytest.raises(ValueError):
        routing_analysis(a, a, 3)


def test_recurring_heads():
    same = [report_from({(0, 0): 0.1, (1, 1): 0.2}) for _ in range(3)]
    rec = recurring_heads(same, top_n=10)
    assert len(rec) == 10 and all(r.count == 3 for r in rec)
    assert rec[0].mean_abs_delta == pytest.approx(0.2)
    a = report_from({(0, 0): 1.0}, L=1, H=2)
    b = report_from({(0, 1): 1.0}, L=1, H=2)
    assert recurring_heads([a, b], top_n=1) == []
    with pytest.raises(ValueError):
        recurring_heads([a])


def test_overlap_on_published_head_sets():
    rep = cross_task_overlap(PLANNING_RECURRING, FACTUAL_TOP10, n_layers=16, n_heads=32)
    assert rep.intersection == []
    assert rep.planning_mean_layer == pytest.approx(7.4)
    assert rep.task_b_mean_layer == pytest.approx(12.8)
    assert round(100 * rep.planning_depth) == 46 and round(100 * rep.task_b_depth) == 80


def test_overlap_trivial_cases():
    full = cross_task_overlap(["L1:H0", "L2:H1"], ["L1:H0", "L2:H1"], 4)
    assert full.intersection == [(1, 0), (2, 1)]
    part = cross_task_overlap(["L1:H0"], ["L1:H0", "L2:H1"], 4)
    assert part.intersection == [(1, 0)]
    with pytest.raises(ValueError):
        cross_task_overlap(["L5:H0"], ["L1:H0"], 4)
    with pytest.raises(ValueError):
        cross_task_overlap(["L1:H9"], ["L1:H0"], 4, n_heads=8)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_deltas_are_exact_differences(seed):
    rng = np.random.default_rng(seed)
    a0, a1 = rng.random((3, 2, 5, 5)), rng.random((3, 2, 5, 5))
    site = int(rng.integers(0, 5))
    rep = routing_analysis(fake_trace(a0), fake_trace(a1), site)
    assert len(rep.deltas) == 6
    for h in rep.deltas:
        assert h.delta == float(a1[h.layer, h.head, -1, site]) - float(a0[h.layer, h.head, -1, site])
    mags = [abs(h.delta) for h in rep.top_k]
    assert mags == sorted(mags, reverse=True)
    swapped = routing_analysis(fake_trace(a1), fake_trace(a0), site)
    assert swapped.total_shift == pytest.approx(rep.total_shift)

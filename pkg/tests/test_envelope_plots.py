import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cltprobe.envelope import SCHEMA_VERSION, ResultEnvelope, payload_bytes, to_jsonable
from cltprobe.plots import render_plot, series_for

SWEEP = {"p_by_position": [1e-4, 2e-4, 0.9], "baseline_p": 1e-4, "planning_site": 2}
STRENGTH = {"points": [{"strength": 0.0, "p_target": 0.1, "top_head": "L4:H1", "top_head_delta": 0.0,
                        "total_shift": 0.0},
                       {"strength": 5.0, "p_target": 0.6, "top_head": "L4:H1", "top_head_delta": 0.5,
                        "total_shift": 0.9}]}
ROUTING = {"full": {"top10": [{"layer": 4, "head": 1, "baseline": 0.1, "steered": 0.9, "delta": 0.8},
                              {"layer": 4, "head": 0, "baseline": 0.7, "steered": 0.1, "delta": -0.6}]}}


def test_to_jsonable_numpy_and_nonfinite():
    out = to_jsonable({"a": np.float32(1.5), "b": np.arange(3), "c": float("inf"), "d": {3, 1},
                       "e": np.bool_(True)})
    assert out == {"a": 1.5, "b": [0, 1, 2], "c": "inf", "d": [1, 3], "e": True}
    json.dumps(out)


def test_envelope_roundtrip(tmp_path):
    env = ResultEnvelope("sweep", {"strength": 10.0}, {"x": [1, 2]}, {"engine": "t"}, {"elapsed_s": 1.0})
    back = ResultEnvelope.read(env.write(tmp_path / "e.json"))
    assert back == env and back.schema_version == SCHEMA_VERSION
    with pytest.raises(ValueError):
        ResultEnvelope.from_dict({"command": "x"})


def test_payload_bytes_ignore_timing():
    a = ResultEnvelope("c", {}, {"v": 1}, timing={"elapsed_s": 1.0})
    b = ResultEnvelope("c", {}, {"v": 1}, timing={"elapsed_s": 2.0})
    assert payload_bytes(a) == payload_bytes(b) and a.dumps() != b.dumps()


@pytest.mark.parametrize("kind,payload,rows", [("sweep", SWEEP, 3), ("strength", STRENGTH, 2),
                                               ("routing", ROUTING, 2)])
def test_render_writes_svg_and_csv(tmp_path, kind, payload, rows):
    svg, csv_path = render_plot(payload, kind, tmp_path / f"{kind}.svg")
    assert svg.read_text().lstrip().startswith("<?xml")
    lines = csv_path.read_text().splitlines()
    assert len(lines) == rows + 1
    svg2, _ = render_plot(payload, kind, tmp_path / f"{kind}2.svg")
    assert svg.read_bytes() == svg2.read_bytes()


def test_mismatched_payload_raises():
    with pytest.raises(ValueError):
        series_for(STRENGTH, "sweep")
    with pytest.raises(ValueError):
        series_for(SWEEP, "routing")
    with pytest.raises(ValueError):
        series_for(SWEEP, "pie")


@given(st.recursive(st.none() | st.booleans() | st.integers() | st.floats(allow_nan=False) | st.text(),
                    lambda kids: st.lists(kids, max_size=3) | st.dictionaries(st.text(max_size=5), kids,
                                                                              max_size=3), max_leaves=10))
def test_envelope_json_is_stable(payload):
    env = ResultEnvelope("c", {}, {"p": payload})
    assert ResultEnvelope.loads(env.dumps()).dumps() == env.dumps()

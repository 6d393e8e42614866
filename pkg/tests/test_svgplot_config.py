import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eigkoop import config
from eigkoop.errors import ConfigError
from eigkoop.svgplot import Panel, nice_ticks, render, write_svg


@given(st.floats(-1e6, 1e6), st.floats(1e-3, 1e6))
def test_nice_ticks_cover_range(lo, span):
    hi = lo + span
    t = nice_ticks(lo, hi)
    assert t[0] <= lo + 1e-9 * abs(lo) and t[-1] >= hi - 1e-9 * abs(hi)
    assert 2 <= len(t) <= 12
    assert np.allclose(np.diff(t), t[1] - t[0])


def test_nice_ticks_degenerate_range():
    t = nice_ticks(1.0, 1.0)
    assert t[0] <= 1.0 <= t[-1]


def _panels():
    t = np.linspace(0, 1, 50)
    return [Panel("a & b", "t", "x").add(t, np.sin(t), "sin").add(t, np.cos(t), "cos", dashed=True),
            Panel("phase", "x1", "x2").add(np.sin(t), np.cos(t), "orbit")]


def test_svg_is_well_formed_and_deterministic(tmp_path):
    svg = render(_panels(), cols=2)
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")
    assert svg.count("<polyline") == 3
    assert "a &amp; b" in svg
    assert render(_panels(), cols=2) == svg
    write_svg(tmp_path / "f.svg", _panels())
    ET.parse(tmp_path / "f.svg")


def test_svg_handles_nonfinite_values():
    p = Panel("x").add([0, 1, 2], [1.0, np.nan, 2.0], "gappy")
    ET.fromstring(render([p]))


def _minimal(**over):
    doc = {"version": 1, "system": {"preset": "duffing"}}
    doc.update(over)
    return doc


def test_defaults_are_filled():
    cfg = config.validate(_minimal())
    assert cfg["data"]["trajectories"] == 100 and cfg["data"]["duration"] == 8.0
    assert cfg["mpc"]["Np"] == 100 and cfg["mpc"]["R"] == [[1e-4]]
    assert cfg["lift"]["N"] == 20
    vdp = config.validate({"version": 1, "system": {"preset": "vanderpol"}})
    assert vdp["predict"]["x0"] == [-0.1382, 0.1728] and vdp["mpc"] is None


def test_unknown_keys_rejected_with_path():
    with pytest.raises(ConfigError, match="lift"):
        config.validate(_minimal(lift={"N": 4, "bogus": 1}))
    with pytest.raises(ConfigError):
        config.validate(_minimal(extra=1))


def test_wrong_version_rejected():
    with pytest.raises(ConfigError):
        config.validate({"version": 2, "system": {"preset": "duffing"}})


@pytest.mark.parametrize("over", [
    {"lift": {"N": 6, "partition": [2, 2]}},
    {"mpc": {"Np": 5, "Q": [[1]], "R": [[1]], "reference": {"times": [0, 1], "values": [[0]]}}},
    {"data": {"controlled": {"low": 1.0, "high": -1.0}}},
    {"data": {"Ts": -0.01}},
])
def test_cross_field_and_type_errors(over):
    with pytest.raises(ConfigError):
        config.validate(_minimal(**over))


def test_load_reports_json_position(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"version": 1,\n "system": }')
    with pytest.raises(ConfigError, match="line 2"):
        config.load(p)


def test_load_seed_override(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(_minimal()))
    assert config.load(p, seed_override=9)["data"]["seed"] == 9

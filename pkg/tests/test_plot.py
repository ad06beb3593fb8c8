import re
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from midl.layers import ConfigError
from midl.plot import HEIGHT, WIDTH, emit_smi_scatter, smi_scatter_svg

NS = "{http://www.w3.org/2000/svg}"


def points(svg):
    root = ET.fromstring(svg.split("\n", 1)[1])
    return [c for c in root.iter(f"{NS}circle") if c.get("class") == "point"]


def test_empty_plot_is_valid_svg_with_axes():
    svg = smi_scatter_svg([], [])
    root = ET.fromstring(svg.split("\n", 1)[1])
    assert root.get("version") == "1.1"
    assert len([l for l in root.iter(f"{NS}line") if l.get("class") == "axis"]) == 2
    assert "activation frequency" in svg and "MI" in svg
    assert points(svg) == []


def test_points_within_bounds(rng):
    svg = smi_scatter_svg(rng.random(50), rng.random(50) * 0.3)
    for c in points(svg):
        assert 0 <= float(c.get("cx")) <= WIDTH and 0 <= float(c.get("cy")) <= HEIGHT


def test_point_count_matches_gated_width(tmp_path, rng):
    result = {"neuron_stats": {"frequency": rng.random(16).tolist(), "mi": rng.random(16).tolist()}}
    path = tmp_path / "p.svg"
    svg = emit_smi_scatter([result], path)
    assert path.read_text() == svg
    assert len(points(svg)) == 16
    assert svg == emit_smi_scatter([result])


def test_missing_smi_data():
    with pytest.raises(ConfigError, match="SMI"):
        emit_smi_scatter([{"neuron_stats": None}])
    with pytest.raises(ConfigError):
        smi_scatter_svg([0.1], [])

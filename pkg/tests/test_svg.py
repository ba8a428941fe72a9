from __future__ import annotations

import xml.etree.ElementTree as ET

import numpy as np
import pytest

from mdrelabel.svg import heatmap, line_plot, read_csv_twin


def test_line_plot_csv_holds_plotted_data(tmp_path):
    x = np.linspace(0, 1, 7)
    y = {"F": x**2 + 0.1, "G": np.where(x > 0.5, np.inf, x)}
    svg, csv = line_plot(tmp_path / "p", x, y, title="a & b", shade=(0.2, 0.4), hline=1.0)
    ET.parse(svg)  # well-formed
    header, body = read_csv_twin(csv)
    assert header == ["x", "F", "G"]
    assert np.array_equal(body[:, 0], x)
    assert np.array_equal(body[:, 1], y["F"])
    assert np.array_equal(body[:, 2], y["G"])


def test_line_plot_is_byte_stable(tmp_path):
    a = line_plot(tmp_path / "a", [1, 2, 3], {"s": [3, 1, 2]})
    b = line_plot(tmp_path / "b", [1, 2, 3], {"s": [3, 1, 2]})
    assert a[0].read_bytes() == b[0].read_bytes()
    assert a[1].read_bytes() == b[1].read_bytes()


def test_line_plot_shape_check(tmp_path):
    with pytest.raises(ValueError):
        line_plot(tmp_path / "p", [1, 2], {"s": [1, 2, 3]})


def test_heatmap_csv_has_raw_counts(tmp_path):
    m = np.array([[5, 1], [0, 4]])
    svg, csv = heatmap(tmp_path / "h", m, ["nominal", "leak"])
    ET.parse(svg)
    assert csv.read_text() == "truth\\pred,nominal,leak\nnominal,5,1\nleak,0,4\n"
    with pytest.raises(ValueError):
        heatmap(tmp_path / "bad", np.zeros((2, 3)))

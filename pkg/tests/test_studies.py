from __future__ import annotations

import numpy as np
import pytest

from mdrelabel import studies
from mdrelabel.studies import (
    LeakRow,
    LeakStudyConfig,
    WindowStudyConfig,
    leak_study,
    leak_table,
    spearman_trend,
    timestep_f1,
    window_size_study,
)


def fake_hits(threshold):
    """Detectability that switches on at a per-start log10 leak threshold."""
    def hits(model, sim, cfg, cases, jobs=1):
        out = {}
        for s, lg in cases:
            out[(s, lg)] = 0.0 if lg is None else float(lg >= threshold[s])
        return out
    return hits


def test_bisection_converges_to_threshold(monkeypatch):
    thr = {200.0: -2.3, 600.0: -2.9, 1000.0: -5.0}
    monkeypatch.setattr(studies, "leak_hits", fake_hits(thr))
    cfg = LeakStudyConfig(iterations=12)
    rows = leak_study(None, None, cfg)
    r200, r600, r1000 = rows
    assert r200.bracketed and r600.bracketed
    width = 3.0 / 2 ** 12
    for r, t in ((r200, -2.3), (r600, -2.9)):
        assert r.lower_log10 < t <= r.upper_log10
        assert r.upper_log10 - r.lower_log10 == pytest.approx(width)
        assert r.min_detectable_log10 == r.upper_log10
    assert not r1000.bracketed and "downward" in r1000.note
    assert r1000.min_detectable_log10 is None
    assert leak_table(rows)["monotonicity"] == "non-increasing"


def test_undetected_grid_maximum_is_reported(monkeypatch):
    monkeypatch.setattr(studies, "leak_hits", fake_hits({200.0: 0.5}))
    (row,) = leak_study(None, None, LeakStudyConfig(start_times=(200.0,)))
    assert not row.bracketed and "upward" in row.note
    d = row.to_dict()
    assert d["min_detectable_fraction"] is None and d["zero_leak_detectability"] == 0.0


def test_leak_table_trends():
    def row(v):
        return LeakRow(0.0, True, v, v - 0.1, v)
    assert leak_table([row(-1), row(-2)])["monotonicity"] == "non-increasing"
    assert leak_table([row(-2), row(-1)])["monotonicity"] == "non-decreasing"
    assert leak_table([row(-2), row(-1), row(-3)])["monotonicity"] == "mixed"
    assert leak_table([row(-2)])["monotonicity"] is None


def test_leak_config_validation():
    with pytest.raises(ValueError):
        LeakStudyConfig(leak_grid=(-1, -4)).validate()
    with pytest.raises(ValueError):
        LeakStudyConfig(detect_fraction=0).validate()


def test_timestep_f1():
    t = np.array([0, 1, 1, 0], dtype=bool)
    assert timestep_f1(np.array([0, 1, 0, 1], dtype=bool), t) == pytest.approx(0.5)
    assert timestep_f1(np.zeros(4, bool), np.zeros(4, bool)) is None
    assert timestep_f1(np.zeros(4, bool), t) == 0.0


def test_spearman_trend():
    rows = [{"duration": 0.1, "window": T, "f1": f} for T, f in ((5, 0.9), (10, 0.7), (20, 0.5), (40, None))]
    assert spearman_trend(rows, 0.1) == pytest.approx(-1.0)
    assert spearman_trend(rows, 0.2) is None


def test_window_study_small():
    cfg = WindowStudyConfig(durations=(0.0, 0.2), window_sizes=(5, 10), n_nominal=60, n_anomalous=20,
                            n_points=100)
    rows = window_size_study(cfg)
    assert [(r["duration"], r["window"]) for r in rows] == [(0.0, 5), (0.0, 10), (0.2, 5), (0.2, 10)]
    for r in rows[:2]:
        assert r["f1"] is None and r["flagged_fraction"] < 0.2
    for r in rows[2:]:
        assert r["f1"] is not None and r["true_positives"] > 0
    assert window_size_study(cfg) == rows


def test_window_study_single_cell():
    cfg = WindowStudyConfig(durations=(0.3,), window_sizes=(10,), n_nominal=30, n_anomalous=5, n_points=100)
    (row,) = window_size_study(cfg)
    assert row["duration"] == 0.3 and row["window"] == 10

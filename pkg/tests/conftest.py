from __future__ import annotations

import numpy as np
import pytest

from mdrelabel.datastore import AnomalyMeta, DatasetManifest, LabelSet, Trial, interval_labels
from mdrelabel.sim.scenario import Scenario, default_scenario_dict


def make_trial(trial_id, values, meta=None, time=None):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    time = np.arange(len(values), dtype=float) if time is None else time
    return Trial(trial_id, values, LabelSet(interval_labels(time, meta)), meta)


def gaussian_trials(n_trials, n_steps, n_params, seed, first_id=0):
    rng = np.random.default_rng(seed)
    return [make_trial(first_id + i, rng.standard_normal((n_steps, n_params))) for i in range(n_trials)]


def two_volume_scenario(pa=2e6, pb=1e5, va=1.0, vb=2.0, ta=290.0, tb=290.0, end=200.0, area=1e-4):
    """Two rigid adiabatic gas volumes joined by one always-open valve."""
    d = default_scenario_dict()
    d.pop("montecarlo")
    d["volumes"] = [
        {"name": "tank", "volume": va, "p0": [pa, 0], "t0": [ta, 0]},
        {"name": "prop", "volume": vb, "p0": [pb, 0], "t0": [tb, 0]},
    ]
    d["valves"] = [{"name": "V", "kind": "shutoff", "upstream": "tank", "downstream": "prop",
                    "full_area": area, "discharge_coeff": 0.8, "stroke_time": 0.2,
                    "schedule": [{"t_start": 0, "t_end": end, "mode": "open"}]}]
    d["loading"] = {"liquid_start": [0, 0], "liquid_end": [0, 0], "t_start": 0, "t_end": end}
    d["timing"] = {"sim_end": end, "n_timesteps": 401, "substeps": 8}
    d["phases"] = {"loading_end": end * 0.4, "valve_test_end": end * 0.6, "depress_end": end * 0.8,
                   "sim_end": end}
    d["sensors"] = [{"name": "P_tank", "volume": "tank", "quantity": "pressure"},
                    {"name": "P_prop", "volume": "prop", "quantity": "pressure"}]
    return Scenario.from_dict(d)


@pytest.fixture
def toy_manifest():
    return DatasetManifest(n_trials=3, parameter_names=["a", "b"], class_names=["nominal", "x:fail_open", "x:leak"],
                           generator="sim", seed=7, n_timesteps=11, dt=0.5)


@pytest.fixture
def toy_trials(toy_manifest):
    rng = np.random.default_rng(0)
    time = toy_manifest.time()
    metas = [None, AnomalyMeta(1, "x", "fail_open", 1.0, 3.0, {"fail_open_fraction": 0.5}),
             AnomalyMeta(2, "x", "internal_leak", 2.5, 5.0, {"leak_fraction": 0.01})]
    return [make_trial(i, rng.standard_normal((11, 2)) * 10 ** rng.uniform(-3, 6), m, time)
            for i, m in enumerate(metas)]


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)

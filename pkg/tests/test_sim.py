from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from conftest import two_volume_scenario
from mdrelabel.datastore import AnomalyMeta, read_dataset
from mdrelabel.sim.montecarlo import (
    MonteCarloConfig,
    SimResult,
    draw_in_range,
    generate_dataset,
    generate_trials,
    injection_for,
    load_sim_config,
    plan_trial,
    plans_to_trials,
    run_trial,
    simulate_plans,
    simulate_trials,
    truncnorm,
)
from mdrelabel.sim.physics import Injection, Network, SimulationFault, TrialParams, integrate
from mdrelabel.sim.scenario import Scenario, load_scenario


def fixed_params(scen: Scenario) -> TrialParams:
    nval = len(scen.valves)
    rate = np.array([[v.stroke_rate for v in scen.valves]])
    return TrialParams(np.array([[v.p0[0] for v in scen.volumes]]), np.array([[v.t0[0] for v in scen.volumes]]),
                       np.zeros(1), np.zeros(1), np.zeros((1, nval)), np.full((1, nval), np.nan),
                       np.full((1, nval), np.nan), rate, rate.copy())


def closed_default_scenario() -> Scenario:
    d = load_scenario().to_dict()
    for v in d["valves"]:
        if v["name"] == "LRV":
            v["schedule"] = [{"t_start": 0, "t_end": 1250, "mode": "locked"}]
    return Scenario.from_dict(d)


def lrv_openings(time, position, before):
    opened = (position > 0.5).astype(int)
    up = np.flatnonzero(np.diff(opened) == 1) + 1
    return time[up[time[up] < before]]


def test_two_volume_blowdown_equilibrium():
    scen = two_volume_scenario()
    res = integrate(scen, fixed_params(scen), Injection.none(1, 1))
    # rigid adiabatic volumes: internal energy is conserved, so p_f = sum(p V) / sum(V)
    pf = (2e6 * 1.0 + 1e5 * 2.0) / 3.0
    assert np.all(np.abs(res.values[0, -1] / pf - 1) < 1e-3)


@settings(max_examples=10, deadline=None)
@given(st.floats(2e5, 5e6), st.floats(1e5, 2e5), st.floats(0.2, 3.0), st.floats(0.2, 3.0))
def test_blowdown_equilibrium_any_volumes(pa, pb, va, vb):
    scen = two_volume_scenario(pa, pb, va, vb)
    res = integrate(scen, fixed_params(scen), Injection.none(1, 1))
    pf = (pa * va + pb * vb) / (va + vb)
    assert np.all(np.abs(res.values[0, -1] / pf - 1) < 1e-3)


def test_closed_system_conserves_mass_every_step():
    cfg = load_sim_config()
    scen = closed_default_scenario()
    net = Network(scen)
    plan = plan_trial(0, cfg, class_id=0)
    state = net.initial_state(plan.params)
    h = scen.dt / scen.substeps
    none = Injection.none(1, net.n_valve)
    worst = 0.0
    for k in range(3000):
        m0 = state.mass.sum()
        state = net.step(state, k * h, h, plan.params, none)
        worst = max(worst, abs(state.mass.sum() - m0) / m0)
    assert worst <= 1e-9


def test_lrv_cycles_with_shrinking_gaps():
    cfg = load_sim_config()
    trial_plan = plan_trial(0, cfg, class_id=0)
    res = integrate(cfg.scenario, trial_plan.params, Injection.none(1, len(cfg.scenario.valves)))
    j = cfg.scenario.valve_index("LRV")
    opens = lrv_openings(res.time, res.positions[0, :, j], cfg.scenario.phases.loading_end)
    gaps = np.diff(opens)
    assert len(opens) >= 10
    assert spearmanr(np.arange(len(gaps)), gaps)[0] < 0


def test_truncnorm_stays_inside_bound():
    rng = np.random.default_rng(0)
    x = truncnorm(rng, 5.0, 2.0, size=(20000,))
    assert x.min() >= 5 - 6 and x.max() <= 5 + 6
    assert abs(x.mean() - 5) < 0.05


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(0, 1e6), st.integers(0, 2**31), st.sampled_from(["truncnorm", "uniform"]))
def test_draw_in_range_inside(lo, width, seed, how):
    x = draw_in_range(np.random.default_rng(seed), lo, lo + width, how)
    assert lo <= x <= lo + width


def test_draw_in_range_rejects_empty():
    with pytest.raises(ValueError):
        draw_in_range(np.random.default_rng(0), 1.0, 0.0)


def test_plan_is_a_pure_function_of_seed():
    cfg = load_sim_config(base_seed=99)
    a, b = plan_trial(4, cfg), plan_trial(4, cfg)
    assert a.anomaly == b.anomaly
    for k in TrialParams.__dataclass_fields__:
        assert np.array_equal(getattr(a.params, k), getattr(b.params, k), equal_nan=True)
    assert a.seed == 103


def test_late_anomalies_get_shifted_settings():
    cfg = load_sim_config()
    cls = cfg.montecarlo.by_id(8)  # SOV-HB internal leak, bounds relax after t = 1000
    spec = cls.settings["log10_leak_fraction"]
    seen = []
    for i in range(400):
        p = plan_trial(i, cfg, class_id=8)
        seen.append((p.anomaly.start_time, p.anomaly.settings["log10_leak_fraction"]))
    late = [v for s, v in seen if s > spec["late_after"]]
    early = [v for s, v in seen if s <= spec["late_after"]]
    assert late and early
    assert min(early) >= spec["range"][0]
    assert min(late) >= spec["range"][0] + spec["late_shift"][0]
    assert min(late) < spec["range"][0]


def test_injection_mapping():
    scen = load_scenario()
    j = scen.valve_index("SOV-HB")
    inj = injection_for(AnomalyMeta(8, "SOV-HB", "internal_leak", 10.0, 50.0, {"log10_leak_fraction": -2.0}), scen)
    assert inj.leak_fraction[0, j] == pytest.approx(0.01)
    assert inj.start[0] == 10.0 and inj.end[0] == 50.0
    inj = injection_for(AnomalyMeta(1, "SOV-PT1,2", "fail_closed", 0.0, 5.0, {}), scen)
    assert inj.stuck[0, scen.valve_index("SOV-PT1")] == 0 and inj.stuck[0, scen.valve_index("SOV-PT2")] == 0
    assert np.isnan(inj.stuck[0, j])
    with pytest.raises(ValueError):
        injection_for(AnomalyMeta(1, "LRV", "gp_window", 0.0, 5.0, {}), scen)


def test_mixture_includes_nominal_and_normalizes():
    cfg = load_sim_config()
    mix = cfg.montecarlo.mixture()
    assert mix[0] == pytest.approx(cfg.montecarlo.nominal_fraction)
    assert sum(mix.values()) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        MonteCarloConfig(class_mixture={99: 1.0}).validate()


def test_faulted_rows_are_recorded_not_returned():
    cfg = load_sim_config()
    plans = [plan_trial(i, cfg, class_id=0) for i in range(2)]
    n = cfg.scenario.n_timesteps
    res = SimResult(np.zeros((2, n, 7)), np.zeros((2, n, 5)), np.arange(n) * cfg.scenario.dt,
                    [SimulationFault("prop", 3.0, 1)])
    trials, faults = plans_to_trials(plans, res, cfg.scenario)
    assert [t.trial_id for t in trials] == [0]
    assert faults[0]["trial_id"] == 1 and faults[0]["volume"] == "prop"


def test_simulation_is_deterministic_and_independent_of_batching():
    cfg = load_sim_config(base_seed=5)
    plans = [plan_trial(i, cfg) for i in range(3)]
    cfg.montecarlo.chunk_size = 3
    a, _ = simulate_trials(cfg, plans)
    cfg.montecarlo.chunk_size = 1
    c, _ = simulate_trials(cfg, plans)
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, c))
    b = run_trial(cfg, plans[2].anomaly, seed=plans[2].seed, trial_id=2)
    assert np.array_equal(a[2].values, b.values)


def test_config_hash_tracks_content(tmp_path):
    a = load_sim_config(base_seed=1)
    assert a.config_hash == load_sim_config(base_seed=1).config_hash
    assert a.config_hash != load_sim_config(base_seed=2).config_hash
    assert a.config_hash != load_sim_config(overrides={"ambient": {"pressure": 1e5}}, base_seed=1).config_hash


@pytest.fixture(scope="module")
def every_class():
    """One trial per roster class plus a nominal one, simulated as one batch."""
    cfg = load_sim_config(base_seed=40)
    ids = [0] + [c.class_id for c in cfg.montecarlo.roster]
    plans = [plan_trial(i, cfg, class_id=c) for i, c in enumerate(ids)]
    return cfg, plans, simulate_plans(plans, cfg)


def test_valve_positions_stay_in_unit_interval(every_class):
    _, _, res = every_class
    assert not res.faults
    assert res.positions.min() >= 0.0 and res.positions.max() <= 1.0


def test_lrv_stays_shut_while_locked(every_class):
    cfg, plans, res = every_class
    scen = cfg.scenario
    j = scen.valve_index("LRV")
    locked = np.zeros(scen.n_timesteps, dtype=bool)
    for seg in scen.valves[j].schedule:
        if seg.mode == "locked":
            locked |= (res.time > seg.t_start + 1.0) & (res.time < seg.t_end)
    assert locked.any()
    for row, plan in enumerate(plans):
        a = plan.anomaly
        mask = locked.copy()
        if a is not None and a.component == "LRV" and a.mode == "fail_open":
            mask &= ~((res.time >= a.start_time) & (res.time <= a.end_time + 1.0))
        assert np.all(res.positions[row, mask, j] == 0.0), a


def test_pt_valves_move_only_in_their_phases(every_class):
    cfg, plans, res = every_class
    t = res.time
    quiet = (t < cfg.scenario.phases.loading_end) | ((t > 1126.0) & (t < 1200.0))
    for name in ("SOV-PT1", "SOV-PT2"):
        j = cfg.scenario.valve_index(name)
        for row, plan in enumerate(plans):
            a = plan.anomaly
            if a is not None and a.component == "SOV-PT1,2" and a.mode == "fail_open":
                continue
            assert np.all(res.positions[row, quiet, j] == 0.0)


def test_pt_fail_closed_keeps_prop_below_nominal_mean():
    cfg = load_sim_config(base_seed=300)
    ip = cfg.scenario.sensor_names.index("P_prop")
    nominal = simulate_plans([plan_trial(i, cfg, class_id=0) for i in range(8)], cfg)
    mean = nominal.values[:, :, ip].mean(axis=0)
    t = nominal.time
    for start in (1201.0, 1216.0):
        meta = AnomalyMeta(11, "SOV-PT1,2", "fail_closed", start, start + 3.0)
        res = simulate_plans([plan_trial(i, cfg, anomaly=meta) for i in range(8)], cfg)
        during = (t > start) & (t <= start + 3.0)
        assert np.all(res.values[:, during, ip] < mean[during])


def test_nominal_ensemble_is_dispersed():
    cfg = load_sim_config(base_seed=7)
    res = simulate_plans([plan_trial(i, cfg, class_id=0) for i in range(5)], cfg)
    assert np.all(res.values.std(axis=0) > 0)
    flat = res.values.reshape(5, -1)
    assert len({row.tobytes() for row in flat}) == 5


def test_empty_and_nominal_only_datasets(tmp_path):
    man = generate_dataset(load_sim_config(n_trials=0), tmp_path / "empty")
    assert man.n_trials == 0 and read_dataset(tmp_path / "empty")[1] == []
    cfg = load_sim_config(overrides={"montecarlo": {"nominal_fraction": 1.0}}, n_trials=4)
    _, trials = generate_trials(cfg)
    assert len(trials) == 4
    assert all(t.is_nominal and not t.labels.classes.any() for t in trials)

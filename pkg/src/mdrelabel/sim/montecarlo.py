"""Monte Carlo anomaly injection on top of the lumped-parameter network."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..datastore import (
    AnomalyMeta,
    DatasetManifest,
    LabelSet,
    Trial,
    interval_labels,
    write_dataset,
)
from .physics import Injection, Network, SimResult, TrialParams, integrate
from .scenario import Scenario, deep_merge, default_scenario_dict

logger = logging.getLogger(__name__)

TRUNCATION = 3.0  # sigmas


def truncnorm(rng: np.random.Generator, mean, sigma, size=None, bound: float = TRUNCATION):
    """Normal draw rejected outside mean +/- bound*sigma."""
    mean = np.broadcast_to(np.asarray(mean, dtype=float), size or np.shape(mean))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), mean.shape)
    out = np.empty(mean.shape)
    todo = np.ones(mean.shape, dtype=bool)
    while todo.any():
        z = rng.standard_normal(int(todo.sum()))
        ok = np.abs(z) <= bound
        idx = np.flatnonzero(todo)[ok]
        out.flat[idx] = mean.flat[idx] + sigma.flat[idx] * z[ok]
        todo.flat[idx] = False
    return out if out.shape else float(out)


def draw_in_range(rng: np.random.Generator, lo: float, hi: float, how: str = "truncnorm") -> float:
    """Draw from [lo, hi]: a 3-sigma truncated normal centred on the range, or uniform."""
    if hi < lo:
        raise ValueError(f"empty range [{lo}, {hi}]")
    if hi == lo:
        return float(lo)
    if how == "uniform":
        return float(rng.uniform(lo, hi))
    return float(truncnorm(rng, 0.5 * (lo + hi), (hi - lo) / (2 * TRUNCATION)))


@dataclass(frozen=True)
class AnomalyClass:
    class_id: int
    name: str
    component: str
    valves: tuple[str, ...]
    mode: str
    duration: dict
    settings: dict

    @classmethod
    def from_dict(cls, d: dict) -> AnomalyClass:
        return cls(d["class_id"], d["name"], d["component"], tuple(d["valves"]), d["mode"],
                   dict(d["duration"]), dict(d.get("settings", {})))


@dataclass
class MonteCarloConfig:
    n_trials: int = 0
    base_seed: int = 0
    nominal_fraction: float = 0.5
    class_mixture: dict = field(default_factory=dict)  # class_id -> weight; empty = uniform
    roster: list[AnomalyClass] = field(default_factory=list)
    settings_distribution: str = "truncnorm"
    chunk_size: int = 64
    dispersion_scale: float = 1.0  # multiplies every initial-condition sigma

    def validate(self) -> None:
        if not 0.0 <= self.nominal_fraction <= 1.0:
            raise ValueError("nominal_fraction must lie in [0, 1]")
        ids = {c.class_id for c in self.roster}
        for k, w in self.mixture().items():
            if w < 0:
                raise ValueError("class mixture weights must be non-negative")
            if k != 0 and k not in ids:
                raise ValueError(f"mixture references unknown class {k}")

    def mixture(self) -> dict[int, float]:
        """Full mixture over class ids, including nominal (0)."""
        if self.class_mixture:
            mix = {int(k): float(v) for k, v in self.class_mixture.items()}
            if 0 not in mix:
                anom = sum(mix.values())
                if anom > 0 and self.nominal_fraction < 1:
                    mix = {k: v * (1 - self.nominal_fraction) / anom for k, v in mix.items()}
                mix[0] = self.nominal_fraction if anom > 0 else 1.0
            return mix
        n = len(self.roster)
        mix = {c.class_id: (1 - self.nominal_fraction) / n for c in self.roster} if n else {}
        mix[0] = self.nominal_fraction if n else 1.0
        return mix

    def class_names(self) -> list[str]:
        names = ["nominal"]
        for c in sorted(self.roster, key=lambda c: c.class_id):
            names.append(c.name)
        return names

    def by_id(self, class_id: int) -> AnomalyClass:
        for c in self.roster:
            if c.class_id == class_id:
                return c
        raise KeyError(class_id)

    @classmethod
    def from_dict(cls, d: dict, **kw) -> MonteCarloConfig:
        roster = [AnomalyClass.from_dict(r) for r in d.get("roster", [])]
        cfg = cls(
            n_trials=int(d.get("n_trials", 0)),
            base_seed=int(d.get("base_seed", 0)),
            nominal_fraction=float(d.get("nominal_fraction", 0.5)),
            class_mixture={int(k): float(v) for k, v in d.get("class_mixture", {}).items()},
            roster=roster,
            settings_distribution=d.get("settings_distribution", "truncnorm"),
            chunk_size=int(d.get("chunk_size", 64)),
            dispersion_scale=float(d.get("dispersion_scale", 1.0)),
        )
        for k, v in kw.items():
            if v is not None:
                setattr(cfg, k, v)
        cfg.validate()
        return cfg


@dataclass
class SimConfig:
    """Scenario plus Monte Carlo settings; this is what gets hashed."""

    scenario: Scenario
    montecarlo: MonteCarloConfig
    document: dict

    @property
    def config_hash(self) -> str:
        doc = dict(self.document)
        doc["montecarlo"] = dict(doc.get("montecarlo", {}),
                                 n_trials=self.montecarlo.n_trials,
                                 base_seed=self.montecarlo.base_seed)
        blob = json.dumps(doc, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_sim_config(path: str | Path | None = None, overrides: dict | None = None,
                    **mc_kw) -> SimConfig:
    """Load scenario + Monte Carlo settings.

    ``path`` names a JSON file merged recursively over the packaged defaults, so
    it may hold a complete scenario or only the keys it changes.
    """
    doc = default_scenario_dict()
    if path is not None:
        doc = deep_merge(doc, json.loads(Path(path).read_text()))
    if overrides:
        doc = deep_merge(doc, overrides)
    scen = Scenario.from_dict(doc)
    mc = MonteCarloConfig.from_dict(doc.get("montecarlo", {}), **mc_kw)
    doc["montecarlo"] = dict(doc.get("montecarlo", {}), n_trials=mc.n_trials, base_seed=mc.base_seed)
    return SimConfig(scen, mc, doc)


# -- sampling -----------------------------------------------------------------


def sample_params(scenario: Scenario, rng: np.random.Generator, scale: float = 1.0) -> TrialParams:
    """Draw one trial's initial conditions and component dispersions."""
    nva = len(scenario.valves)
    p0 = np.array([[truncnorm(rng, v.p0[0], v.p0[1] * scale) for v in scenario.volumes]])
    t0 = np.array([[truncnorm(rng, v.t0[0], v.t0[1] * scale) for v in scenario.volumes]])
    l0 = truncnorm(rng, scenario.liquid_start[0], scenario.liquid_start[1] * scale)
    l1 = truncnorm(rng, scenario.liquid_end[0], scenario.liquid_end[1] * scale)
    band = np.zeros((1, nva))
    crack = np.full((1, nva), np.nan)
    reseal = np.full((1, nva), np.nan)
    for j, v in enumerate(scenario.valves):
        if v.band_sigma > 0:
            band[0, j] = truncnorm(rng, 0.0, v.band_sigma * scale)
        if v.kind == "lockup_relief":
            crack[0, j] = truncnorm(rng, v.crack_pressure[0], v.crack_pressure[1] * scale)
            reseal[0, j] = truncnorm(rng, v.reseal_pressure[0], v.reseal_pressure[1] * scale)
    rate = np.array([[v.stroke_rate for v in scenario.valves]])
    return TrialParams(p0, t0, np.array([l0]), np.array([l1]), band, crack, reseal, rate, rate.copy())


def draw_class(rng: np.random.Generator, mc: MonteCarloConfig) -> int:
    mix = mc.mixture()
    ids = sorted(mix)
    w = np.array([mix[i] for i in ids], dtype=float)
    if w.sum() <= 0:
        return 0
    return int(ids[rng.choice(len(ids), p=w / w.sum())])


def draw_anomaly(rng: np.random.Generator, cls: AnomalyClass, scenario: Scenario,
                 how: str = "truncnorm") -> AnomalyMeta:
    """Sample start/end times and settings for one anomaly of class ``cls``."""
    sim_end = scenario.sim_end
    dur = cls.duration
    if dur["kind"] == "long":
        lo, hi = dur.get("start", [0.0, sim_end])
        start = float(rng.uniform(lo, min(hi, sim_end)))
        end = sim_end
    else:
        d = float(rng.uniform(*dur["range"]))
        lo, hi = dur.get("start", [0.0, sim_end - d])
        start = float(rng.uniform(lo, max(lo, min(hi, sim_end - d))))
        end = min(start + d, sim_end)
    settings = {}
    for key, spec in sorted(cls.settings.items()):
        lo, hi = spec["range"]
        if "late_after" in spec and start > spec["late_after"]:
            lo += spec["late_shift"][0]
            hi += spec["late_shift"][1]
        if "value" in spec:
            settings[key] = float(spec["value"])
        else:
            settings[key] = draw_in_range(rng, lo, hi, spec.get("dist", how))
    return AnomalyMeta(cls.class_id, cls.component, cls.mode, start, end, settings)


def injection_for(meta: AnomalyMeta | None, scenario: Scenario, valves: Sequence[str] | None = None) -> Injection:
    """Translate anomaly metadata into batched (B=1) injection arrays."""
    inj = Injection.none(1, len(scenario.valves))
    if meta is None:
        return inj
    names = list(valves) if valves else _group_valves(meta.component, scenario)
    idx = [scenario.valve_index(n) for n in names]
    inj.start[:] = meta.start_time
    inj.end[:] = meta.end_time
    s = meta.settings
    for j in idx:
        if meta.mode == "fail_open":
            inj.stuck[0, j] = s["fail_open_fraction"]
        elif meta.mode == "fail_closed":
            inj.stuck[0, j] = 0.0
        elif meta.mode == "slow_opening":
            inj.open_delay[0, j] = s["opening_delay"]
        elif meta.mode == "slow_closing":
            inj.close_delay[0, j] = s["closing_delay"]
        elif meta.mode == "internal_leak":
            inj.leak_fraction[0, j] = 10.0 ** s["log10_leak_fraction"] if "log10_leak_fraction" in s \
                else s["leak_fraction"]
        elif meta.mode == "high_crack":
            inj.crack_shift[0, j] = s["crack_shift"]
        elif meta.mode == "low_reseal":
            inj.reseal_shift[0, j] = s["reseal_shift"]
        elif meta.mode == "band_drift":
            inj.band_shift[0, j] = s["band_shift"]
        else:
            raise ValueError(f"unsupported anomaly mode {meta.mode!r}")
    return inj


def _group_valves(component: str, scenario: Scenario) -> list[str]:
    if component in scenario.valve_names:
        return [component]
    if component == "SOV-PT1,2":
        return ["SOV-PT1", "SOV-PT2"]
    raise KeyError(f"unknown component {component!r}")


@dataclass
class TrialPlan:
    """Everything random about one trial, drawn up front from its own seed."""

    trial_id: int
    seed: int
    params: TrialParams
    anomaly: AnomalyMeta | None
    valves: tuple[str, ...] = ()

    def rng_for_noise(self) -> np.random.Generator:
        return np.random.default_rng([self.seed, 1])


def plan_trial(trial_id: int, cfg: SimConfig, class_id: int | None = None,
               anomaly: AnomalyMeta | None = None) -> TrialPlan:
    """Draw class, anomaly settings and initial conditions for ``trial_id``.

    ``class_id`` forces the class (0 = nominal); ``anomaly`` forces the whole
    injection while the physical dispersion is still drawn from the seed.
    """
    seed = cfg.montecarlo.base_seed + trial_id
    rng = np.random.default_rng(seed)
    mc = cfg.montecarlo
    cid = draw_class(rng, mc) if class_id is None else class_id
    meta = anomaly
    valves: tuple[str, ...] = ()
    if meta is None and cid != 0:
        cls = mc.by_id(cid)
        meta = draw_anomaly(rng, cls, cfg.scenario, mc.settings_distribution)
        valves = cls.valves
    elif meta is not None:
        try:
            valves = mc.by_id(meta.class_id).valves
        except KeyError:
            valves = ()
    params = sample_params(cfg.scenario, np.random.default_rng([seed, 0]), mc.dispersion_scale)
    return TrialPlan(trial_id, seed, params, meta, valves)


def simulate_plans(plans: Sequence[TrialPlan], cfg: SimConfig) -> SimResult:
    """Integrate a batch of planned trials together."""
    scen = cfg.scenario
    params = TrialParams(**{
        k: np.concatenate([getattr(p.params, k) for p in plans])
        for k in TrialParams.__dataclass_fields__
    })
    inj = Injection.stack([injection_for(p.anomaly, scen, p.valves or None) for p in plans])
    rngs = [p.rng_for_noise() for p in plans]
    return integrate(scen, params, inj, noise_rng=rngs, network=Network(scen))


def plans_to_trials(plans: Sequence[TrialPlan], result: SimResult, scenario: Scenario) -> tuple[list[Trial], list[dict]]:
    time = result.time
    trials, faults = [], []
    bad_rows = {f.trial: f for f in result.faults}
    for row, plan in enumerate(plans):
        if row in bad_rows:
            f = bad_rows[row]
            faults.append({"trial_id": plan.trial_id, "volume": f.volume, "time": f.time, "message": str(f)})
            continue
        labels = LabelSet(interval_labels(time, plan.anomaly), "baseline")
        trials.append(Trial(plan.trial_id, result.values[row].copy(), labels, plan.anomaly))
    return trials, faults


def run_trial(cfg: SimConfig, injection: AnomalyMeta | None = None, seed: int = 0,
              trial_id: int = 0) -> Trial:
    """Simulate one trial; the seed fixes initial-condition dispersion and sensor noise."""
    mc = cfg.montecarlo
    saved = mc.base_seed
    mc.base_seed = seed - trial_id
    try:
        plan = plan_trial(trial_id, cfg, class_id=0 if injection is None else None, anomaly=injection)
    finally:
        mc.base_seed = saved
    result = simulate_plans([plan], cfg)
    if result.faults:
        raise result.faults[0]
    trials, _ = plans_to_trials([plan], result, cfg.scenario)
    return trials[0]


def _simulate_chunk(args):
    plans, cfg = args
    result = simulate_plans(plans, cfg)
    return plans_to_trials(plans, result, cfg.scenario)


def simulate_trials(cfg: SimConfig, plans: Sequence[TrialPlan], jobs: int = 1) -> tuple[list[Trial], list[dict]]:
    """Simulate planned trials in fixed-size chunks (chunking never depends on ``jobs``)."""
    size = max(1, cfg.montecarlo.chunk_size)
    chunks = [list(plans[i:i + size]) for i in range(0, len(plans), size)]
    trials: list[Trial] = []
    faults: list[dict] = []
    if jobs > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_simulate_chunk, [(c, cfg) for c in chunks]))
    else:
        results = [_simulate_chunk((c, cfg)) for c in chunks]
    for t, f in results:
        trials.extend(t)
        faults.extend(f)
    return trials, faults


def generate_trials(cfg: SimConfig, jobs: int = 1) -> tuple[DatasetManifest, list[Trial]]:
    mc = cfg.montecarlo
    plans = [plan_trial(i, cfg) for i in range(mc.n_trials)]
    trials, faults = simulate_trials(cfg, plans, jobs)
    for f in faults:
        logger.warning("trial %d failed: %s", f["trial_id"], f["message"])
    manifest = DatasetManifest(
        n_trials=len(trials),
        parameter_names=cfg.scenario.sensor_names,
        class_names=mc.class_names(),
        generator="sim",
        seed=mc.base_seed,
        n_timesteps=cfg.scenario.n_timesteps,
        dt=cfg.scenario.dt,
        config_hash=cfg.config_hash,
        faults=faults,
        extra={"requested_trials": mc.n_trials},
    )
    return manifest, trials


def generate_dataset(cfg: SimConfig, path: str | Path, jobs: int = 1) -> DatasetManifest:
    """Run the Monte Carlo campaign and write it as a dataset directory."""
    manifest, trials = generate_trials(cfg, jobs)
    write_dataset(manifest, trials, path)
    if manifest.faults:
        logger.warning("%d of %d trials faulted; see manifest 'faults'",
                       len(manifest.faults), cfg.montecarlo.n_trials)
    return manifest

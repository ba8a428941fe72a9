"""Minimum-detectable-leak bisection and the detection-window-size study."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datastore import AnomalyMeta
from .detector import detect_many
from .gp import KernelSpec, default_grid, generate_gp_trials
from .nominal import NominalModel, WindowFamily, fit_nominal
from .relabel import injected_mask
from .sim.montecarlo import SimConfig, TrialPlan, _group_valves, plan_trial, simulate_trials

logger = logging.getLogger(__name__)


# -- leak study -----------------------------------------------------------------


@dataclass
class LeakStudyConfig:
    component: str = "SOV-HB"
    start_times: tuple[float, ...] = (200.0, 600.0, 1000.0)
    leak_grid: tuple[float, float] = (-4.0, -1.0)  # log10 leak-fraction bracket
    duration: float = 100.0
    n_seeds: int = 8
    seed_bank: int = 50_000
    detect_fraction: float = 0.9
    iterations: int = 6

    def validate(self) -> None:
        if not self.leak_grid[0] < self.leak_grid[1]:
            raise ValueError("leak_grid must be an increasing (low, high) pair")
        if not 0 < self.detect_fraction <= 1:
            raise ValueError("detect_fraction must lie in (0, 1]")
        if self.n_seeds < 1 or self.iterations < 0 or self.duration <= 0:
            raise ValueError("n_seeds >= 1, iterations >= 0 and duration > 0 required")


@dataclass
class LeakRow:
    start_time: float
    bracketed: bool
    min_detectable_log10: float | None
    lower_log10: float
    upper_log10: float
    detectability: dict = field(default_factory=dict)  # log10 leak -> fraction of seeds
    zero_leak_detectability: float = 0.0
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "start_time": self.start_time,
            "bracketed": self.bracketed,
            "min_detectable_log10": self.min_detectable_log10,
            "min_detectable_fraction": None if self.min_detectable_log10 is None
            else 10.0 ** self.min_detectable_log10,
            "lower_log10": self.lower_log10,
            "upper_log10": self.upper_log10,
            "detectability": {format(k, ".6g"): v for k, v in sorted(self.detectability.items())},
            "zero_leak_detectability": self.zero_leak_detectability,
            "note": self.note,
        }


def _leak_meta(cfg: LeakStudyConfig, start: float, log10_leak: float | None, sim_end: float) -> AnomalyMeta:
    end = min(start + cfg.duration, sim_end)
    frac = 0.0 if log10_leak is None else 10.0 ** log10_leak
    return AnomalyMeta(1, cfg.component, "internal_leak", start, end, {"leak_fraction": frac})


def leak_hits(model: NominalModel, sim: SimConfig, cfg: LeakStudyConfig,
              cases: Sequence[tuple[float, float | None]], jobs: int = 1) -> dict[tuple, float]:
    """Detectability for each (start_time, log10 leak) case over the seed bank.

    ``None`` as the leak means a zero leak fraction. A seed counts as a hit
    when some timestep inside the leak interval is flagged in the leaky trial
    but not in its leak-free twin (same seed), so nominal false alarms never
    count as detections.
    """
    scen = sim.scenario
    valves = tuple(_group_valves(cfg.component, scen))
    base = [plan_trial(cfg.seed_bank + k, sim, class_id=0) for k in range(cfg.n_seeds)]
    plans: list[TrialPlan] = list(base)
    keys: list[tuple] = [("twin", k) for k in range(cfg.n_seeds)]
    for s, lg in cases:
        meta = _leak_meta(cfg, s, lg, scen.sim_end)
        for k, p in enumerate(base):
            plans.append(TrialPlan(p.trial_id, p.seed, p.params, meta, valves))
            keys.append((s, lg, k))
    trials, faults = simulate_trials(sim, plans, jobs)
    if faults:
        raise RuntimeError(f"{len(faults)} leak-study trials faulted: {faults[:3]}")
    time = np.arange(scen.n_timesteps) * scen.dt
    flags = {key: tr.flags for key, tr in zip(keys, detect_many(model, trials, time))}
    out: dict[tuple, float] = {}
    for s, lg in cases:
        mask = injected_mask(time, s, min(s + cfg.duration, scen.sim_end))
        hits = sum(bool((flags[(s, lg, k)] & ~flags[("twin", k)] & mask).any()) for k in range(cfg.n_seeds))
        out[(s, lg)] = hits / cfg.n_seeds
    return out


def leak_study(model: NominalModel, sim: SimConfig, cfg: LeakStudyConfig = LeakStudyConfig(),
               jobs: int = 1) -> list[LeakRow]:
    """Bisect, per start time, for the smallest log10 leak detected on >= detect_fraction of seeds."""
    cfg.validate()
    lo, hi = cfg.leak_grid
    starts = list(cfg.start_times)
    first = leak_hits(model, sim, cfg, [(s, lg) for s in starts for lg in (None, lo, hi)], jobs)
    rows = {}
    active = []
    for s in starts:
        det = {lo: first[(s, lo)], hi: first[(s, hi)]}
        row = LeakRow(s, False, None, lo, hi, det, first[(s, None)])
        if det[hi] < cfg.detect_fraction:
            row.note = "grid maximum not detected; widen the leak grid upward"
        elif det[lo] >= cfg.detect_fraction:
            row.note = "grid minimum already detected; widen the leak grid downward"
        else:
            row.bracketed = True
            active.append(s)
        rows[s] = row
    for _ in range(cfg.iterations):
        if not active:
            break
        mids = {s: 0.5 * (rows[s].lower_log10 + rows[s].upper_log10) for s in active}
        res = leak_hits(model, sim, cfg, [(s, m) for s, m in mids.items()], jobs)
        for s, m in mids.items():
            frac = res[(s, m)]
            rows[s].detectability[m] = frac
            if frac >= cfg.detect_fraction:
                rows[s].upper_log10 = m
            else:
                rows[s].lower_log10 = m
    for s in active:
        rows[s].min_detectable_log10 = rows[s].upper_log10
    out = [rows[s] for s in starts]
    for r in out:
        logger.info("leak study t0=%g: %s", r.start_time,
                    r.min_detectable_log10 if r.bracketed else r.note)
    return out


def leak_table(rows: Sequence[LeakRow]) -> dict:
    vals = [r.min_detectable_log10 for r in rows if r.bracketed]
    trend = None
    if len(vals) >= 2:
        d = np.diff(vals)
        trend = "non-increasing" if np.all(d <= 0) else ("non-decreasing" if np.all(d >= 0) else "mixed")
    return {
        "rows": [r.to_dict() for r in rows],
        "monotonicity": trend,
    }


# -- window-size study ------------------------------------------------------------


@dataclass
class WindowStudyConfig:
    durations: tuple[float, ...] = (0.1, 0.2, 0.4)
    window_sizes: tuple[int, ...] = (5, 10, 20, 40)
    n_nominal: int = 300
    n_anomalous: int = 100
    n_points: int = 1000
    centre: float = 0.5
    amplitude: float = 0.3
    base_seed: int = 0
    theta: float = 1e-4
    pstar: float = 0.99


def timestep_f1(flags: np.ndarray, truth: np.ndarray) -> float | None:
    """Binary F1 of flags against truth; None when both are empty (undefined)."""
    tp = int((flags & truth).sum())
    fp = int((flags & ~truth).sum())
    fn = int((~flags & truth).sum())
    if tp + fp + fn == 0 or (truth.sum() == 0 and tp == 0):
        return None
    return 2 * tp / (2 * tp + fp + fn)


def window_size_study(cfg: WindowStudyConfig = WindowStudyConfig()) -> list[dict]:
    """Timestep-level detection F1 per (anomaly duration, window size T)."""
    grid = default_grid(cfg.n_points)
    nominal = generate_gp_trials(cfg.n_nominal, 0, KernelSpec(), cfg.base_seed, cfg.n_points)
    models = {T: fit_nominal(nominal, [WindowFamily(T)], cfg.theta, cfg.pstar) for T in cfg.window_sizes}
    rows = []
    for dur in cfg.durations:
        if dur <= 0:
            test = generate_gp_trials(cfg.n_anomalous, 0, KernelSpec(), cfg.base_seed, cfg.n_points,
                                      first_id=10**6)
            truth = np.zeros(cfg.n_points, dtype=bool)
        else:
            a = max(cfg.centre - dur / 2, grid[0])
            b = min(cfg.centre + dur / 2, grid[-1])
            spec = KernelSpec("anomalous", a, b, cfg.amplitude)
            test = generate_gp_trials(0, cfg.n_anomalous, spec, cfg.base_seed, cfg.n_points, first_id=10**6)
            truth = (grid >= a) & (grid <= b)
        for T in cfg.window_sizes:
            traces = detect_many(models[T], test, grid)
            flags = np.stack([tr.flags for tr in traces])
            f1 = timestep_f1(flags, np.broadcast_to(truth, flags.shape))
            rows.append({
                "duration": dur,
                "window": T,
                "f1": f1,
                "true_positives": int((flags & truth).sum()),
                "flagged_fraction": float(flags.mean()),
            })
    return rows


def spearman_trend(rows: Sequence[dict], duration: float) -> float | None:
    """Spearman rank correlation of F1 against T for one duration."""
    from scipy.stats import spearmanr

    pts = [(r["window"], r["f1"]) for r in rows if r["duration"] == duration and r["f1"] is not None]
    if len(pts) < 2 or len({p[1] for p in pts}) < 2:
        return None  # undefined for a constant F1 column
    rho = spearmanr([p[0] for p in pts], [p[1] for p in pts])[0]
    return None if rho is None or math.isnan(rho) else float(rho)

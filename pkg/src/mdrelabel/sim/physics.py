"""Lumped-parameter gas network: ideal-gas control volumes joined by orifices.

All arrays carry a leading batch axis so a whole Monte Carlo batch advances
through one call. A single trial is simply a batch of one.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from .scenario import AMBIENT, Scenario

# fraction of the pressure-equalizing mass one valve may move in one sub-step
EQUALIZE_CAP = 0.4


class SimulationFault(RuntimeError):
    """Raised when a volume goes non-physical (negative mass, NaN state)."""

    def __init__(self, volume: str, time: float, trial: int | None = None):
        self.volume = volume
        self.time = time
        self.trial = trial
        where = f" (batch row {trial})" if trial is not None else ""
        super().__init__(f"non-physical state in volume {volume!r} at t={time:.3f} s{where}")


@dataclass
class TrialParams:
    """Per-trial physical parameters, batched along axis 0."""

    p0: np.ndarray  # (B, n_vol)
    t0: np.ndarray  # (B, n_vol)
    liquid_start: np.ndarray  # (B,)
    liquid_end: np.ndarray  # (B,)
    band_offset: np.ndarray  # (B, n_valve)
    crack: np.ndarray  # (B, n_valve), nan for non-relief valves
    reseal: np.ndarray  # (B, n_valve)
    open_rate: np.ndarray  # (B, n_valve), position fraction per second
    close_rate: np.ndarray  # (B, n_valve)

    @property
    def batch(self) -> int:
        return self.p0.shape[0]

    def take(self, rows) -> TrialParams:
        return TrialParams(**{k: np.asarray(v)[rows] for k, v in self.__dict__.items()})


@dataclass
class Injection:
    """Anomaly effects, applied while ``start <= t <= end`` (batched).

    Neutral values mean "no effect": nan ``stuck``, rate scale 1, zero shifts
    and leak fractions.
    """

    start: np.ndarray  # (B,)
    end: np.ndarray  # (B,)
    stuck: np.ndarray  # (B, n_valve) pinned position or nan
    open_delay: np.ndarray  # (B, n_valve) seconds added to the opening stroke
    close_delay: np.ndarray  # (B, n_valve) seconds added to the closing stroke
    leak_fraction: np.ndarray  # (B, n_valve) parallel leak area / full area
    crack_shift: np.ndarray  # (B, n_valve) Pa
    reseal_shift: np.ndarray  # (B, n_valve) Pa
    band_shift: np.ndarray  # (B, n_valve) Pa, applied to both band edges

    @classmethod
    def none(cls, batch: int, n_valve: int) -> Injection:
        z = np.zeros((batch, n_valve))
        return cls(
            start=np.full(batch, np.inf),
            end=np.full(batch, -np.inf),
            stuck=np.full((batch, n_valve), np.nan),
            open_delay=z.copy(),
            close_delay=z.copy(),
            leak_fraction=z.copy(),
            crack_shift=z.copy(),
            reseal_shift=z.copy(),
            band_shift=z.copy(),
        )

    @classmethod
    def stack(cls, items: list[Injection]) -> Injection:
        return cls(**{k: np.concatenate([getattr(i, k) for i in items]) for k in cls.__dataclass_fields__})

    def take(self, rows) -> Injection:
        return Injection(**{k: np.asarray(v)[rows] for k, v in self.__dict__.items()})


@dataclass
class SystemState:
    """Gas mass and internal energy per volume plus valve positions."""

    mass: np.ndarray  # (B, n_vol) kg
    energy: np.ndarray  # (B, n_vol) J
    position: np.ndarray  # (B, n_valve) in [0, 1]
    command: np.ndarray  # (B, n_valve) latched 0/1 command
    liquid: np.ndarray  # (B,) m^3 in the prop tank
    fault: np.ndarray = field(default=None)  # (B,) bool, frozen rows

    def __post_init__(self):
        if self.fault is None:
            self.fault = np.zeros(self.mass.shape[0], dtype=bool)

    def copy(self) -> SystemState:
        return SystemState(*(np.array(getattr(self, k)) for k in
                             ("mass", "energy", "position", "command", "liquid", "fault")))


class Network:
    """Pre-digested scenario topology for fast stepping."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        s = scenario
        self.R = s.gas_constant
        self.gamma = s.gamma
        self.cv = s.cv
        self.cp = s.cp
        self.n_vol = len(s.volumes)
        self.n_valve = len(s.valves)
        self.capacity = np.array([v.volume for v in s.volumes])
        self.heat_transfer = np.array([v.heat_transfer for v in s.volumes])
        self.wall_temperature = np.array([v.wall_temperature for v in s.volumes])
        self.prop = s.prop_index()
        self.up = np.array([s.volume_index(v.upstream) for v in s.valves])
        self.dn = np.array([s.volume_index(v.downstream) for v in s.valves])
        self.area = np.array([v.full_area * v.discharge_coeff for v in s.valves])
        self.relief = np.array([v.kind == "lockup_relief" for v in s.valves])
        self._seg_starts = [[seg.t_start for seg in v.schedule] for v in s.valves]
        self.p_amb = s.ambient_pressure
        self.t_amb = s.ambient_temperature
        g = self.gamma
        self.crit_ratio = (2.0 / (g + 1.0)) ** (g / (g - 1.0))
        self.choke_coeff = np.sqrt(g / self.R) * (2.0 / (g + 1.0)) ** ((g + 1.0) / (2.0 * (g - 1.0)))
        self.sub_coeff = np.sqrt(2.0 * g / ((g - 1.0) * self.R))
        t0, t1 = s.loading_window
        self.load_t0, self.load_t1 = t0, t1

    def segment(self, j: int, t: float):
        sched = self.scenario.valves[j].schedule
        i = bisect.bisect_right(self._seg_starts[j], t) - 1
        i = min(max(i, 0), len(sched) - 1)
        return sched[i]

    def fill_rate(self, params: TrialParams, t: float) -> np.ndarray:
        if self.load_t0 <= t < self.load_t1:
            return (params.liquid_end - params.liquid_start) / (self.load_t1 - self.load_t0)
        return np.zeros(params.batch)

    def gas_volume(self, liquid: np.ndarray) -> np.ndarray:
        vg = np.broadcast_to(self.capacity, (liquid.shape[0], self.n_vol)).copy()
        vg[:, self.prop] -= liquid
        return vg

    def thermo(self, state: SystemState) -> tuple[np.ndarray, np.ndarray]:
        """Return (pressure, temperature) per volume."""
        temp = state.energy / (state.mass * self.cv)
        pres = state.mass * self.R * temp / self.gas_volume(state.liquid)
        return pres, temp

    def orifice_flux(self, p_up, p_dn, t_up):
        """Mass flux per unit effective area (kg/s/m^2) for p_up >= p_dn."""
        r = np.clip(p_dn / p_up, 0.0, 1.0)
        g = self.gamma
        choked = r <= self.crit_ratio
        sub = p_up * self.sub_coeff / np.sqrt(t_up) * np.sqrt(
            np.maximum(r ** (2.0 / g) - r ** ((g + 1.0) / g), 0.0)
        )
        crit = p_up * self.choke_coeff / np.sqrt(t_up)
        return np.where(choked, crit, sub)

    def initial_state(self, params: TrialParams) -> SystemState:
        B = params.batch
        liquid = params.liquid_start.astype(float).copy()
        vg = self.gas_volume(liquid)
        mass = params.p0 * vg / (self.R * params.t0)
        energy = mass * self.cv * params.t0
        pos = np.zeros((B, self.n_valve))
        cmd = np.zeros((B, self.n_valve))
        state = SystemState(mass, energy, pos, cmd, liquid)
        # settle commands on the initial pressures so band valves start consistent
        pres, _ = self.thermo(state)
        for j in range(self.n_valve):
            cmd[:, j] = self._command(j, 0.0, pres, cmd[:, j], params, Injection.none(B, self.n_valve),
                                      np.zeros(B, dtype=bool))
        return state

    def _command(self, j, t, pres, prev, params, inj, active):
        seg = self.segment(j, t)
        if seg.mode == "closed" or seg.mode == "locked":
            return np.zeros_like(prev)
        if seg.mode == "open":
            return np.ones_like(prev)
        if seg.mode == "band":
            x = pres[:, self.scenario.volume_index(seg.sensor)]
            if seg.reference:
                x = x - pres[:, self.scenario.volume_index(seg.reference)]
            shift = params.band_offset[:, j] + np.where(active, inj.band_shift[:, j], 0.0)
            lo = seg.band[0] + shift
            hi = seg.band[1] + shift
            return np.where(x < lo, 1.0, np.where(x > hi, 0.0, prev))
        # relief: watch the upstream pressure
        x = pres[:, self.up[j]]
        crack = params.crack[:, j] + np.where(active, inj.crack_shift[:, j], 0.0)
        reseal = params.reseal[:, j] - np.where(active, inj.reseal_shift[:, j], 0.0)
        return np.where(x >= crack, 1.0, np.where(x <= reseal, 0.0, prev))

    def step(self, state: SystemState, t: float, h: float, params: TrialParams,
             injection: Injection) -> SystemState:
        """Advance every batch row by one sub-step of length ``h``."""
        if h <= 0:
            raise ValueError("time step must be positive")
        B = params.batch
        s = state.copy()
        active = (t >= injection.start) & (t <= injection.end)
        pres, temp = self.thermo(s)

        for j in range(self.n_valve):
            s.command[:, j] = self._command(j, t, pres, s.command[:, j], params, injection, active)

        open_rate = np.where(active[:, None], 1.0 / (1.0 / params.open_rate + injection.open_delay),
                             params.open_rate)
        close_rate = np.where(active[:, None], 1.0 / (1.0 / params.close_rate + injection.close_delay),
                              params.close_rate)
        delta = np.clip(s.command - s.position, -close_rate * h, open_rate * h)
        s.position = np.clip(s.position + delta, 0.0, 1.0)
        pinned = active[:, None] & np.isfinite(injection.stuck)
        s.position = np.where(pinned, np.nan_to_num(injection.stuck), s.position)

        leak = np.where(active[:, None], injection.leak_fraction, 0.0)
        eff_area = (s.position + leak) * self.area  # (B, n_valve)

        vg = self.gas_volume(s.liquid)
        dmass = np.zeros_like(s.mass)
        denergy = np.zeros_like(s.energy)
        inv_vg = 1.0 / vg
        for j in range(self.n_valve):
            iu, idn = self.up[j], self.dn[j]
            pu, tu, ivu = self._node(pres, temp, inv_vg, iu, B)
            pd, td, ivd = self._node(pres, temp, inv_vg, idn, B)
            forward = pu >= pd
            p_hi = np.where(forward, pu, pd)
            p_lo = np.where(forward, pd, pu)
            t_hi = np.where(forward, tu, td)
            flux = self.orifice_flux(p_hi, p_lo, t_hi)
            dm = eff_area[:, j] * flux * h
            cap = EQUALIZE_CAP * (p_hi - p_lo) / (self.gamma * self.R * t_hi * (ivu + ivd))
            dm = np.minimum(dm, cap)
            dm = np.where(forward, dm, -dm)  # signed, positive = upstream -> downstream
            de = dm * self.cp * t_hi
            if iu >= 0:
                dmass[:, iu] -= dm
                denergy[:, iu] -= de
            if idn >= 0:
                dmass[:, idn] += dm
                denergy[:, idn] += de

        q = self.fill_rate(params, t)
        denergy[:, self.prop] += pres[:, self.prop] * q * h
        denergy += self.heat_transfer * vg * (self.wall_temperature - temp) * h

        live = ~s.fault
        s.mass = np.where(live[:, None], s.mass + dmass, s.mass)
        s.energy = np.where(live[:, None], s.energy + denergy, s.energy)
        s.liquid = np.where(live, s.liquid + q * h, s.liquid)

        bad = live[:, None] & ~((s.mass > 0) & (s.energy > 0) & np.isfinite(s.mass) & np.isfinite(s.energy))
        if bad.any():
            s.fault = s.fault | bad.any(axis=1)
            s._fault_volume = bad  # inspected by the integrator
        return s

    def _node(self, pres, temp, inv_vg, idx, B):
        if idx < 0:
            return np.full(B, self.p_amb), np.full(B, self.t_amb), np.zeros(B)
        return pres[:, idx], temp[:, idx], inv_vg[:, idx]


@dataclass
class SimResult:
    values: np.ndarray  # (B, n_timesteps, n_sensors)
    positions: np.ndarray  # (B, n_timesteps, n_valve)
    time: np.ndarray  # (n_timesteps,)
    faults: list  # list of SimulationFault, one per failed row


def integrate(scenario: Scenario, params: TrialParams, injection: Injection,
              noise_rng: list | None = None, network: Network | None = None) -> SimResult:
    """Fixed-step integration with ``scenario.substeps`` sub-steps per output step."""
    net = network or Network(scenario)
    B = params.batch
    nt = scenario.n_timesteps
    dt = scenario.dt
    h = dt / scenario.substeps
    time = np.arange(nt) * dt
    state = net.initial_state(params)
    sensors = scenario.sensors
    sidx = [scenario.volume_index(s["volume"]) for s in sensors]
    is_p = [s["quantity"] == "pressure" for s in sensors]

    values = np.empty((B, nt, len(sensors)))
    positions = np.empty((B, nt, net.n_valve))
    faults: list[SimulationFault] = []

    def record(k, st):
        pres, temp = net.thermo(st)
        for c, (vi, p) in enumerate(zip(sidx, is_p)):
            values[:, k, c] = pres[:, vi] if p else temp[:, vi]
        positions[:, k, :] = st.position

    record(0, state)
    for k in range(1, nt):
        t_base = (k - 1) * dt
        for i in range(scenario.substeps):
            state = net.step(state, t_base + i * h, h, params, injection)
            bad = getattr(state, "_fault_volume", None)
            if bad is not None:
                for row, vol in zip(*np.nonzero(bad)):
                    faults.append(SimulationFault(scenario.volume_names[vol], t_base + i * h, int(row)))
                del state._fault_volume
        record(k, state)

    _add_noise(scenario, values, noise_rng)
    return SimResult(values, positions, time, faults)


def _add_noise(scenario: Scenario, values: np.ndarray, rngs) -> None:
    sp = float(scenario.sensor_noise.get("pressure", 0.0))
    st = float(scenario.sensor_noise.get("temperature", 0.0))
    if (sp == 0.0 and st == 0.0) or rngs is None:
        return
    sig = np.array([sp if s["quantity"] == "pressure" else st for s in scenario.sensors])
    for b, rng in enumerate(rngs):
        values[b] += rng.standard_normal(values.shape[1:]) * sig


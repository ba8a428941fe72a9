"""Scenario description for the ground-stage pressurization twin.

Everything physical (volumes, areas, set points, dispersions) comes from a
JSON document; ``default_scenario.json`` ships with the package.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

AMBIENT = "ambient"
VALVE_KINDS = ("shutoff", "lockup_relief")
SEGMENT_MODES = ("closed", "open", "band", "relief", "locked")


@dataclass(frozen=True)
class VolumeSpec:
    name: str
    volume: float
    p0: tuple[float, float]  # (mean, sigma), Pa
    t0: tuple[float, float]  # (mean, sigma), K
    heat_transfer: float = 0.0  # W/(K m^3 of gas) toward the wall temperature
    wall_temperature: float = 290.0


@dataclass(frozen=True)
class Segment:
    t_start: float
    t_end: float
    mode: str
    sensor: str | None = None
    band: tuple[float, float] | None = None
    reference: str | None = None  # set for differential bands: sensor - reference

    @property
    def band_mode(self) -> str:
        return "differential" if self.reference else "absolute"


@dataclass(frozen=True)
class ValveSpec:
    name: str
    kind: str
    upstream: str
    downstream: str
    full_area: float
    discharge_coeff: float
    stroke_time: float
    schedule: tuple[Segment, ...]
    band_sigma: float = 0.0
    crack_pressure: tuple[float, float] | None = None
    reseal_pressure: tuple[float, float] | None = None

    @property
    def stroke_rate(self) -> float:
        return 1.0 / self.stroke_time


@dataclass(frozen=True)
class PhaseSchedule:
    loading_end: float = 1100.0
    valve_test_end: float = 1125.0
    depress_end: float = 1200.0
    sim_end: float = 1250.0

    def validate(self) -> None:
        b = [0.0, self.loading_end, self.valve_test_end, self.depress_end, self.sim_end]
        if any(hi <= lo for lo, hi in zip(b, b[1:])):
            raise ValueError(f"phase boundaries must be strictly increasing: {b[1:]}")

    def phase_of(self, t: float) -> str:
        if t < self.loading_end:
            return "loading"
        if t < self.valve_test_end:
            return "valve_test"
        if t < self.depress_end:
            return "depress"
        return "prelaunch"


@dataclass(frozen=True)
class Scenario:
    gas_constant: float
    gamma: float
    sim_end: float
    n_timesteps: int
    substeps: int
    ambient_pressure: float
    ambient_temperature: float
    volumes: tuple[VolumeSpec, ...]
    valves: tuple[ValveSpec, ...]
    phases: PhaseSchedule
    liquid_start: tuple[float, float]
    liquid_end: tuple[float, float]
    loading_window: tuple[float, float]
    sensors: tuple[dict, ...]
    sensor_noise: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def dt(self) -> float:
        return self.sim_end / (self.n_timesteps - 1)

    @property
    def volume_names(self) -> list[str]:
        return [v.name for v in self.volumes]

    @property
    def valve_names(self) -> list[str]:
        return [v.name for v in self.valves]

    @property
    def sensor_names(self) -> list[str]:
        return [s["name"] for s in self.sensors]

    @property
    def cv(self) -> float:
        return self.gas_constant / (self.gamma - 1.0)

    @property
    def cp(self) -> float:
        return self.gamma * self.cv

    def volume_index(self, name: str) -> int:
        if name == AMBIENT:
            return -1
        return self.volume_names.index(name)

    def valve_index(self, name: str) -> int:
        return self.valve_names.index(name)

    def prop_index(self) -> int:
        return self.volume_index("prop")

    def validate(self) -> None:
        self.phases.validate()
        if self.n_timesteps < 2 or self.substeps < 1:
            raise ValueError("n_timesteps must be >= 2 and substeps >= 1")
        names = set(self.volume_names) | {AMBIENT}
        for v in self.valves:
            if v.kind not in VALVE_KINDS:
                raise ValueError(f"{v.name}: unknown valve kind {v.kind!r}")
            if v.upstream not in names or v.downstream not in names:
                raise ValueError(f"{v.name}: unknown endpoint volume")
            if v.kind == "lockup_relief":
                if v.crack_pressure is None or v.reseal_pressure is None:
                    raise ValueError(f"{v.name}: relief valve needs crack/reseal pressures")
                if v.reseal_pressure[0] >= v.crack_pressure[0]:
                    raise ValueError(f"{v.name}: reseal must be below crack pressure")
            for seg in v.schedule:
                if seg.mode not in SEGMENT_MODES:
                    raise ValueError(f"{v.name}: unknown segment mode {seg.mode!r}")
                if seg.mode == "band":
                    if seg.band is None or seg.band[0] >= seg.band[1]:
                        raise ValueError(f"{v.name}: band_low must be below band_high")
                    if seg.sensor not in names:
                        raise ValueError(f"{v.name}: unknown band sensor {seg.sensor!r}")
        for s in self.sensors:
            if s["volume"] not in names or s["quantity"] not in ("pressure", "temperature"):
                raise ValueError(f"bad sensor definition {s}")

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Scenario:
        volumes = tuple(
            VolumeSpec(
                name=v["name"],
                volume=float(v["volume"]),
                p0=tuple(v["p0"]),
                t0=tuple(v["t0"]),
                heat_transfer=float(v.get("heat_transfer", 0.0)),
                wall_temperature=float(v.get("wall_temperature", 290.0)),
            )
            for v in d["volumes"]
        )
        valves = []
        for v in d["valves"]:
            segs = tuple(
                Segment(
                    t_start=float(s["t_start"]),
                    t_end=float(s["t_end"]),
                    mode=s["mode"],
                    sensor=s.get("sensor"),
                    band=tuple(s["band"]) if "band" in s else None,
                    reference=s.get("reference"),
                )
                for s in v["schedule"]
            )
            valves.append(
                ValveSpec(
                    name=v["name"],
                    kind=v["kind"],
                    upstream=v["upstream"],
                    downstream=v["downstream"],
                    full_area=float(v["full_area"]),
                    discharge_coeff=float(v["discharge_coeff"]),
                    stroke_time=float(v["stroke_time"]),
                    schedule=segs,
                    band_sigma=float(v.get("band_sigma", 0.0)),
                    crack_pressure=tuple(v["crack_pressure"]) if "crack_pressure" in v else None,
                    reseal_pressure=tuple(v["reseal_pressure"]) if "reseal_pressure" in v else None,
                )
            )
        timing = d["timing"]
        loading = d["loading"]
        scen = cls(
            gas_constant=float(d["gas"]["gas_constant"]),
            gamma=float(d["gas"]["gamma"]),
            sim_end=float(timing["sim_end"]),
            n_timesteps=int(timing["n_timesteps"]),
            substeps=int(timing.get("substeps", 8)),
            ambient_pressure=float(d["ambient"]["pressure"]),
            ambient_temperature=float(d["ambient"]["temperature"]),
            volumes=volumes,
            valves=tuple(valves),
            phases=PhaseSchedule(**d.get("phases", {})),
            liquid_start=tuple(loading["liquid_start"]),
            liquid_end=tuple(loading["liquid_end"]),
            loading_window=(float(loading["t_start"]), float(loading["t_end"])),
            sensors=tuple(d["sensors"]),
            sensor_noise=dict(d.get("sensor_noise", {})),
            raw=copy.deepcopy(d),
        )
        scen.validate()
        return scen


def default_scenario_dict() -> dict:
    text = resources.files("mdrelabel.sim").joinpath("default_scenario.json").read_text()
    return json.loads(text)


def load_scenario(path: str | Path | None = None, overrides: dict | None = None) -> Scenario:
    """Load a scenario JSON file (the packaged default when ``path`` is None).

    ``overrides`` is merged recursively on top of the loaded document.
    """
    if path is None:
        d = default_scenario_dict()
    else:
        d = json.loads(Path(path).read_text())
    if overrides:
        d = deep_merge(d, overrides)
    return Scenario.from_dict(d)


def deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out

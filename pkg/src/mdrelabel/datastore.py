"""Dataset model and on-disk layout shared by every pipeline stage.

Layout of a dataset directory::

    manifest.json                  written last
    anomalies.json                 {trial_id: AnomalyMeta | null}
    trials/trial_<id>.csv          time,<param names...>,label   (baseline labels)
    labels/<provenance>/trial_<id>.csv   time,label            (relabeled / corrected)

Floats are written with 17 significant digits, which round-trips IEEE doubles
exactly.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1
PROVENANCES = ("baseline", "relabeled", "corrected")
GENERATORS = ("gp", "sim")
ANOMALY_MODES = (
    "fail_open",
    "fail_closed",
    "slow_opening",
    "slow_closing",
    "internal_leak",
    "high_crack",
    "low_reseal",
    "band_drift",
    "gp_window",
)
DEFAULT_N_TIMESTEPS = 2721
DEFAULT_DT = 1250.0 / 2720.0


class DatasetError(ValueError):
    """Base class for malformed or inconsistent datasets."""


class DimensionMismatchError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


class FormatVersionError(DatasetError):
    pass


@dataclass
class DatasetManifest:
    n_trials: int
    parameter_names: list[str]
    class_names: list[str]
    generator: str
    seed: int
    n_timesteps: int = DEFAULT_N_TIMESTEPS
    dt: float = DEFAULT_DT
    format_version: int = FORMAT_VERSION
    config_hash: str = ""
    faults: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.n_timesteps < 2:
            raise DatasetError("n_timesteps must be >= 2")
        if not self.dt > 0:
            raise DatasetError("dt must be positive")
        if not self.class_names or self.class_names[0] != "nominal":
            raise DatasetError("class index 0 must be 'nominal'")
        for what, names in (("parameter", self.parameter_names), ("class", self.class_names)):
            if len(set(names)) != len(names):
                raise DatasetError(f"duplicate {what} names")
        if self.generator not in GENERATORS:
            raise DatasetError(f"unknown generator {self.generator!r}")
        if self.n_trials < 0:
            raise DatasetError("n_trials must be >= 0")

    @property
    def n_parameters(self) -> int:
        return len(self.parameter_names)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def time(self) -> np.ndarray:
        return np.arange(self.n_timesteps) * self.dt

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DatasetManifest:
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass
class AnomalyMeta:
    class_id: int
    component: str
    mode: str
    start_time: float
    end_time: float
    settings: dict = field(default_factory=dict)

    def validate(self, sim_end: float | None = None) -> None:
        if self.class_id < 1:
            raise DatasetError("anomaly class_id must be >= 1")
        if self.mode not in ANOMALY_MODES:
            raise DatasetError(f"unknown anomaly mode {self.mode!r}")
        hi = np.inf if sim_end is None else sim_end + 1e-9
        if not (0.0 <= self.start_time <= self.end_time <= hi):
            raise DatasetError(
                f"anomaly window [{self.start_time}, {self.end_time}] outside [0, {sim_end}]"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> AnomalyMeta | None:
        return None if d is None else cls(**d)


@dataclass
class LabelSet:
    classes: np.ndarray
    provenance: str = "baseline"

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64)
        if self.provenance not in PROVENANCES:
            raise DatasetError(f"unknown label provenance {self.provenance!r}")

    def __len__(self) -> int:
        return len(self.classes)

    def check_range(self, n_classes: int) -> None:
        c = self.classes
        if c.size and (c.min() < 0 or c.max() >= n_classes):
            bad = c[(c < 0) | (c >= n_classes)][0]
            raise LabelRangeError(f"label {bad} outside class range [0, {n_classes})")


@dataclass
class Trial:
    trial_id: int
    values: np.ndarray  # (n_timesteps, n_parameters)
    labels: LabelSet
    anomaly: AnomalyMeta | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def is_nominal(self) -> bool:
        return self.anomaly is None

    @property
    def class_id(self) -> int:
        return 0 if self.anomaly is None else self.anomaly.class_id

    def validate(self, manifest: DatasetManifest | None = None) -> None:
        if self.values.ndim != 2:
            raise DimensionMismatchError(f"trial {self.trial_id}: values must be 2-D")
        if not np.all(np.isfinite(self.values)):
            raise DatasetError(f"trial {self.trial_id}: non-finite values")
        if len(self.labels) != self.values.shape[0]:
            raise DimensionMismatchError(f"trial {self.trial_id}: label length != n_timesteps")
        if manifest is not None:
            want = (manifest.n_timesteps, manifest.n_parameters)
            if self.values.shape != want:
                raise DimensionMismatchError(
                    f"trial {self.trial_id}: values shape {self.values.shape} != manifest {want}"
                )
            self.labels.check_range(manifest.n_classes)
            if self.anomaly is not None:
                self.anomaly.validate(manifest.dt * (manifest.n_timesteps - 1))


def interval_labels(time: np.ndarray, meta: AnomalyMeta | None) -> np.ndarray:
    """Baseline labels: the injected class on [start_time, end_time], nominal elsewhere."""
    out = np.zeros(len(time), dtype=np.int64)
    if meta is not None:
        out[(time >= meta.start_time) & (time <= meta.end_time)] = meta.class_id
    return out


# -- writing -----------------------------------------------------------------


def _trial_csv(time: np.ndarray, values: np.ndarray, labels: np.ndarray, names: Sequence[str]) -> str:
    buf = io.StringIO()
    buf.write(",".join(["time", *names, "label"]) + "\n")
    rows = np.column_stack([time, values])
    for row, lab in zip(rows, labels):
        buf.write(",".join(format(float(x), ".17g") for x in row))
        buf.write(f",{int(lab)}\n")
    return buf.getvalue()


def _label_csv(time: np.ndarray, labels: np.ndarray) -> str:
    lines = ["time,label"]
    lines += [f"{format(float(t), '.17g')},{int(c)}" for t, c in zip(time, labels)]
    return "\n".join(lines) + "\n"


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def write_dataset(manifest: DatasetManifest, trials: Sequence[Trial], path: str | Path) -> Path:
    """Write ``trials`` under ``path``; the manifest goes last."""
    manifest.validate()
    if len(trials) != manifest.n_trials:
        raise DimensionMismatchError(
            f"manifest says {manifest.n_trials} trials, got {len(trials)}"
        )
    ids = [t.trial_id for t in trials]
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate trial ids")
    for t in trials:
        t.validate(manifest)

    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        if trials:
            (root / "trials").mkdir(exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot write dataset at {root}: {exc}") from exc
    stale = root / "manifest.json"
    if stale.exists():
        stale.unlink()

    time = manifest.time()
    index = {}
    for t in sorted(trials, key=lambda t: t.trial_id):
        _write_text(
            root / "trials" / f"trial_{t.trial_id}.csv",
            _trial_csv(time, t.values, t.labels.classes, manifest.parameter_names),
        )
        index[str(t.trial_id)] = None if t.anomaly is None else t.anomaly.to_dict()
    if trials:
        _write_text(root / "anomalies.json", json.dumps(index, indent=1, sort_keys=True) + "\n")
    _write_text(root / "manifest.json", json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return root


def write_labels(path: str | Path, provenance: str, labels: dict[int, LabelSet],
                 manifest: DatasetManifest | None = None) -> Path:
    """Write a sibling label set (never touches the baseline trial files)."""
    if provenance == "baseline":
        raise DatasetError("baseline labels live in the trial files and are never rewritten")
    root = Path(path)
    manifest = manifest or read_manifest(root)
    out = root / "labels" / provenance
    out.mkdir(parents=True, exist_ok=True)
    time = manifest.time()
    for tid, ls in sorted(labels.items()):
        if len(ls) != manifest.n_timesteps:
            raise DimensionMismatchError(f"trial {tid}: label length != n_timesteps")
        ls.check_range(manifest.n_classes)
        _write_text(out / f"trial_{tid}.csv", _label_csv(time, ls.classes))
    return out


# -- reading -----------------------------------------------------------------


def read_manifest(path: str | Path) -> DatasetManifest:
    p = Path(path) / "manifest.json"
    if not p.exists():
        raise DatasetError(f"missing manifest: {p}")
    d = json.loads(p.read_text())
    version = int(d.get("format_version", -1))
    if version > FORMAT_VERSION:
        raise FormatVersionError(
            f"dataset format_version {version} is newer than supported {FORMAT_VERSION}"
        )
    m = DatasetManifest.from_dict(d)
    m.validate()
    return m


def _trial_ids(folder: Path) -> list[int]:
    ids = []
    for f in folder.glob("trial_*.csv"):
        try:
            ids.append(int(f.stem.split("_", 1)[1]))
        except ValueError:
            continue
    return sorted(ids)


def _load_csv(path: Path, n_cols: int) -> np.ndarray:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.float64, ndmin=2)
    if arr.shape[1] != n_cols:
        raise DimensionMismatchError(f"{path.name}: expected {n_cols} columns, got {arr.shape[1]}")
    return arr


def read_trial(path: str | Path, trial_id: int, manifest: DatasetManifest | None = None,
               anomaly: AnomalyMeta | None = None) -> Trial:
    root = Path(path)
    manifest = manifest or read_manifest(root)
    f = root / "trials" / f"trial_{trial_id}.csv"
    header = f.open().readline().strip().split(",")
    want = ["time", *manifest.parameter_names, "label"]
    if header != want:
        raise DatasetError(f"{f.name}: header {header} != {want}")
    arr = _load_csv(f, manifest.n_parameters + 2)
    if arr.shape[0] != manifest.n_timesteps:
        raise DimensionMismatchError(f"{f.name}: {arr.shape[0]} rows, manifest says {manifest.n_timesteps}")
    values = np.ascontiguousarray(arr[:, 1:-1])
    if not np.all(np.isfinite(values)):
        raise DatasetError(f"{f.name}: NaN or infinite values")
    labels = LabelSet(arr[:, -1].astype(np.int64), "baseline")
    labels.check_range(manifest.n_classes)
    trial = Trial(trial_id, values, labels, anomaly)
    trial.validate(manifest)
    return trial


def read_dataset(path: str | Path) -> tuple[DatasetManifest, list[Trial]]:
    """Read a dataset directory; trials come back sorted by trial_id."""
    root = Path(path)
    manifest = read_manifest(root)
    index_path = root / "anomalies.json"
    index = json.loads(index_path.read_text()) if index_path.exists() else {}
    ids = _trial_ids(root / "trials")
    if len(ids) != manifest.n_trials:
        raise DatasetError(f"manifest lists {manifest.n_trials} trials, found {len(ids)} files")
    trials = [read_trial(root, tid, manifest, AnomalyMeta.from_dict(index.get(str(tid)))) for tid in ids]
    return manifest, trials


def read_labels(path: str | Path, provenance: str,
                manifest: DatasetManifest | None = None) -> dict[int, LabelSet]:
    """Read one label provenance; ``baseline`` comes from the trial files."""
    root = Path(path)
    manifest = manifest or read_manifest(root)
    if provenance == "baseline":
        out = {}
        for tid in _trial_ids(root / "trials"):
            arr = _load_csv(root / "trials" / f"trial_{tid}.csv", manifest.n_parameters + 2)
            out[tid] = LabelSet(arr[:, -1].astype(np.int64), "baseline")
            out[tid].check_range(manifest.n_classes)
        return out
    folder = root / "labels" / provenance
    if not folder.is_dir():
        raise DatasetError(f"no {provenance!r} labels under {root}")
    out = {}
    for tid in _trial_ids(folder):
        arr = _load_csv(folder / f"trial_{tid}.csv", 2)
        if arr.shape[0] != manifest.n_timesteps:
            raise DimensionMismatchError(f"labels for trial {tid}: wrong length")
        ls = LabelSet(arr[:, 1].astype(np.int64), provenance)
        ls.check_range(manifest.n_classes)
        out[tid] = ls
    return out


def stack_values(trials: Iterable[Trial]) -> np.ndarray:
    """Stack trial matrices into (n_trials, n_timesteps, n_parameters)."""
    trials = list(trials)
    if not trials:
        return np.zeros((0, 0, 0))
    return np.stack([t.values for t in trials])


def write_json(path: str | Path, obj) -> None:
    """Deterministic JSON writer used for every report artifact."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(p.suffix + ".tmp")
    _write_text(tmp, json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, p)

"""Pipeline configuration and the stage functions behind the command line.

Workspace layout (``out``)::

    data/                 dataset (gen-gp | gen-sim), relabel adds labels/relabeled|corrected
    model/                nominal model (fit-nominal)
    traces/               per-trial detection traces + index.json (detect)
    relabel/              coverage.json, summary.json (relabel)
    classifier/<prov>/    trained reference classifiers (train)
    eval/                 EvalReports per provenance + summary.json (eval)
    studies/              leak and window-size tables with plots (leak-study, window-study)
    report/               report.json, report.md and plots (report)

Every JSON artifact carries a ``stamp`` with the config hash, seed and format version.
A stage that raises leaves ``<stage>.failed`` in the workspace; success removes it.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .classifier import ClassifierConfig, ClassifierModel, predict_labels, split_trials, train
from .datastore import (
    FORMAT_VERSION,
    DatasetError,
    LabelSet,
    Trial,
    read_dataset,
    read_labels,
    write_dataset,
    write_json,
    write_labels,
)
from .detector import DetectionTrace, detect_many
from .gp import KernelSpec, generate_gp_trials, gp_manifest
from .metrics import EvalReport, compare_reports, evaluate_many, per_class_table
from .nominal import NominalModel, WindowFamily, cutoff_report, default_families, fit_nominal
from .relabel import (
    ConfusionGroups,
    RelabelPolicy,
    coverage_report,
    default_groups,
    failure_end_index,
    relabel_trial,
    summarize_relabel,
)
from .sim.montecarlo import SimConfig, generate_trials, load_sim_config
from .studies import LeakStudyConfig, WindowStudyConfig, leak_study, leak_table, spearman_trend, window_size_study
from .svg import heatmap, line_plot

logger = logging.getLogger(__name__)

STAGES = ("gen-gp", "gen-sim", "fit-nominal", "detect", "relabel", "train", "eval",
          "leak-study", "window-study", "report")
PACKAGED_SIM_CONFIGS = {"desk_strong": "desk_strong.json"}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage} failed: {message}")
        self.stage = stage


# -- configuration ------------------------------------------------------------------


def _build(cls, d: dict | None, what: str):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ValueError(f"unknown {what} keys: {unknown}")
    for f in fields(cls):
        if f.name in d and isinstance(d[f.name], list) and "tuple" in str(f.type):
            d[f.name] = tuple(d[f.name])
    return cls(**d)


@dataclass
class GPSection:
    n_nominal: int = 300
    n_anomalous: int = 100
    n_points: int = 1000
    n_channels: int = 1
    window_a: float = 0.3
    window_b: float = 0.7
    amplitude: float = 0.3

    def anomaly_kernel(self) -> KernelSpec:
        return KernelSpec("anomalous", self.window_a, self.window_b, self.amplitude)


@dataclass
class SimSection:
    config: str | None = "desk_strong"  # packaged overlay name, a JSON path, or null for the bare defaults
    overrides: dict = field(default_factory=dict)
    n_trials: int | None = None


@dataclass
class DetectorSection:
    theta: float = 1e-4
    pstar: float = 0.99
    families: list = field(default_factory=lambda: [f.to_dict() for f in default_families(True)])

    def window_families(self) -> list[WindowFamily]:
        return [WindowFamily(**f) for f in self.families]


@dataclass
class RelabelSection:
    gap_close: int = 5
    min_run: int = 3
    groups: dict | None = None  # None derives component groups from the class names
    coverage_threshold: float = 0.5


@dataclass
class EvalSection:
    exclude_nominal: bool = False


@dataclass
class PipelineConfig:
    seed: int = 0
    stages: list = field(default_factory=lambda: ["gen-sim", "fit-nominal", "detect", "relabel", "train",
                                                  "eval", "report"])
    gp: GPSection = field(default_factory=GPSection)
    sim: SimSection = field(default_factory=SimSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    relabel: RelabelSection = field(default_factory=RelabelSection)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    leak_study: LeakStudyConfig = field(default_factory=LeakStudyConfig)
    window_study: WindowStudyConfig = field(default_factory=WindowStudyConfig)

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        d = dict(d)
        sections = {
            "gp": GPSection, "sim": SimSection, "detector": DetectorSection, "relabel": RelabelSection,
            "classifier": ClassifierConfig, "eval": EvalSection, "leak_study": LeakStudyConfig,
            "window_study": WindowStudyConfig,
        }
        unknown = sorted(set(d) - set(sections) - {"seed", "stages"})
        if unknown:
            raise ValueError(f"unknown config sections: {unknown}")
        kw: dict[str, Any] = {k: _build(c, d.get(k), k) for k, c in sections.items()}
        cfg = cls(seed=int(d.get("seed", 0)), stages=list(d.get("stages", cls().stages)), **kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> PipelineConfig:
        if path is None:
            return cls()
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        return cls.from_dict(json.loads(p.read_text()))

    def validate(self) -> None:
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise ValueError(f"unknown stages {bad}; choose from {list(STAGES)}")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")
        self.classifier.validate()
        self.leak_study.validate()
        self.detector.window_families()
        RelabelPolicy(self.relabel.gap_close, self.relabel.min_run)

    def with_seed(self, seed: int | None) -> PipelineConfig:
        return self if seed is None else replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def sim_config(self) -> SimConfig:
        path = self.sim.config
        if path in PACKAGED_SIM_CONFIGS:
            path = resources.files("mdrelabel.sim").joinpath(PACKAGED_SIM_CONFIGS[path])
        elif path is not None and not Path(path).exists():
            raise FileNotFoundError(f"sim config not found: {path}")
        return load_sim_config(path, self.sim.overrides or None, n_trials=self.sim.n_trials,
                               base_seed=self.seed)

    @property
    def config_hash(self) -> str:
        doc = self.to_dict()
        doc.pop("stages")
        # hash the resolved simulator document so edits inside a referenced file count
        doc["sim_document_hash"] = self.sim_config().config_hash
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def stamp(self) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed, "format_version": FORMAT_VERSION}

    def classifier_config(self) -> ClassifierConfig:
        return replace(self.classifier, seed=self.classifier.seed + self.seed)


# -- workspace ------------------------------------------------------------------


@dataclass
class Workspace:
    root: Path
    data_dir: Path | None = None
    model_dir: Path | None = None

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def data(self) -> Path:
        return Path(self.data_dir) if self.data_dir else self.root / "data"

    @property
    def model(self) -> Path:
        return Path(self.model_dir) if self.model_dir else self.root / "model"

    @property
    def traces(self) -> Path:
        return self.root / "traces"

    def classifier(self, provenance: str) -> Path:
        return self.root / "classifier" / provenance

    def marker(self, stage: str) -> Path:
        return self.root / f"{stage}.failed"


def _require(path: Path, what: str) -> None:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")


def _load_data(ws: Workspace):
    _require(ws.data / "manifest.json", "dataset")
    return read_dataset(ws.data)


def _load_model(ws: Workspace) -> NominalModel:
    _require(ws.model / "model.json", "nominal model")
    return NominalModel.load(ws.model)


def _load_traces(ws: Workspace, trials: list[Trial]) -> list[DetectionTrace]:
    _require(ws.traces / "index.json", "detection traces")
    out = []
    for t in trials:
        p = ws.traces / f"trial_{t.trial_id}.csv"
        _require(p, "trace file")
        out.append(DetectionTrace.from_csv(p, t.trial_id))
    return out


def _groups(cfg: PipelineConfig, class_names: list[str]) -> ConfusionGroups:
    if cfg.relabel.groups is not None:
        return ConfusionGroups.from_dict(cfg.relabel.groups)
    return default_groups(class_names)


# -- stages ---------------------------------------------------------------------


def stage_gen_gp(cfg: PipelineConfig, ws: Workspace, jobs: int = 1) -> dict:
    g = cfg.gp
    trials = generate_gp_trials(g.n_nominal, g.n_anomalous, g.anomaly_kernel(), cfg.seed, g.n_points,
                                g.n_channels)
    man = gp_manifest(len(trials), g.n_points, cfg.seed, g.n_channels, cfg.config_hash,
                      {"stamp": cfg.stamp(), "kernel": g.anomaly_kernel().to_dict()})
    write_dataset(man, trials, ws.data)
    return {"n_trials": len(trials)}


def stage_gen_sim(cfg: PipelineConfig, ws: Workspace, jobs: int = 1) -> dict:
    sim = cfg.sim_config()
    man, trials = generate_trials(sim, jobs)
    man.config_hash = cfg.config_hash
    man.extra = dict(man.extra, stamp=cfg.stamp(), sim_config_hash=sim.config_hash)
    write_dataset(man, trials, ws.data)
    return {"n_trials": len(trials), "faults": len(man.faults)}


def stage_fit_nominal(cfg: PipelineConfig, ws: Workspace, jobs: int = 1) -> dict:
    man, trials = _load_data(ws)
    nominal = [t for t in trials if t.is_nominal]
    d = cfg.detector
    model = fit_nominal(nominal, d.window_families(), d.theta, d.pstar, man.parameter_names)
    model.meta = {"stamp": cfg.stamp(), "trial_ids": [t.trial_id for t in nominal]}
    model.save(ws.model)
    write_json(ws.model / "cutoffs.json", {"stamp": cfg.stamp(), "families": cutoff_report(model)})
    return {"n_nominal": len(nominal)}


def stage_detect(cfg: PipelineConfig, ws: Workspace, jobs: int = 1) -> dict:
    model = _load_model(ws)
    man, trials = _load_data(ws)
    if man.n_timesteps != model.n_timesteps or man.parameter_names != model.parameter_names:
        raise DatasetError("dataset and nominal model disagree on timesteps or parameters")
    ws.traces.mkdir(parents=True, exist_ok=True)
    index = {}
    for trace in detect_many(model, trials, man.time()):
        trace.to_csv(ws.traces / f"trial_{trace.trial_id}.csv")
        index[str(trace.trial_id)] = {
            "max_F": float(np.max(trace.overall)) if np.isfinite(trace.overall).all() else None,
            "flagged": int(trace.flags.sum()),
        }
    write_json(ws.traces / "index.json", {"stamp": cfg.stamp(), "trials": index})
    return {"n_traces": len(index)}


def stage_relabel(cfg: PipelineConfig, ws: Workspace, jobs: int = 1) -> dict:
    man, trials = _load_data(ws)
    traces = _load_traces(ws, trials)
    policy = RelabelPolicy(cfg.relabel.gap_close, cfg.relabel.min_run)
    relabeled = {t.trial_id: relabel_trial(t, tr, policy) for t, tr in zip(trials, traces)}
    # corrected labels share the relabeled classes; the confusion groups act at scoring time
    corrected = {k: LabelSet(v.classes.copy(), "corrected") for k, v in relabeled.items()}
    write_labels(ws.data, "relabeled", relabeled, man)
    write_labels(ws.data, "corrected", corrected, man)
    groups = _groups(cfg, man.class_names)
    cov = coverage_report(trials, traces, man.time(), man.class_names, cfg.relabel.coverage_threshold)
    anomalous = [c for c in cov.values()]
    nominal_rate = [float(tr.flags.mean()) for t, tr in zip(trials, traces) if t.is_nominal]
    summary = summarize_relabel({t.trial_id: t.labels for t in trials}, relabeled)
    out = ws.root / "relabel"
    write_json(out / "coverage.json", {
        "stamp": cfg.stamp(),
        "classes": cov,
        "overall_detectability": (sum(c["detected"] for c in anomalous) / sum(c["n_trials"] for c in anomalous))
        if anomalous else None,
        "nominal_flag_fraction": float(np.mean(nominal_rate)) if nominal_rate else None,
        "policy": asdict(policy),
        "confusion_groups": groups.to_dict(),
    })
    write_json(out / "summary.json", dict(asdict(summary), stamp=cfg.stamp()))
    return {"changed_timesteps": summary.changed_timesteps}


def stage_train(cfg: PipelineConfig, ws: Workspace, jobs: int = 1, labels: str | None = None) -> dict:
    man, trials = _load_data(ws)
    provs = [labels] if labels else ["baseline", "relabeled"]
    splits = split_trials(trials)
    out = {}
    for prov in provs:
        labs = read_labels(ws.data, prov, man)
        missing = [t.trial_id for t in trials if t.trial_id not in labs]
        if missing:
            raise DatasetError(f"{prov} labels missing for trials {missing[:5]}")
        model = train(trials, labs, cfg.classifier_config(), man.n_classes, man.parameter_names, splits)
        model.meta = dict(model.meta, stamp=cfg.stamp(), provenance=prov)
        model.save(ws.classifier(prov))
        out[prov] = model.history["val_loss"][-1]
    return {"final_val_loss": out}


def evaluate_provenance(cfg: PipelineConfig, ws: Workspace, prov: str, man, trials: list[Trial]) -> EvalReport:
    test = split_trials(trials)["test"]
    if not test:
        raise DatasetError("empty test split")
    model_dir = ws.classifier(prov)
    if prov == "corrected" and not (model_dir / "classifier.json").exists():
        model_dir = ws.classifier("relabeled")  # corrected labels equal the relabeled ones
    _require(model_dir / "classifier.json", f"{prov} classifier")
    model = ClassifierModel.load(model_dir)
    labs = read_labels(ws.data, prov, man)
    time = man.time()
    items = []
    for t in test:
        fend = failure_end_index(time, None if t.anomaly is None else t.anomaly.end_time)
        items.append((predict_labels(model, t), labs[t.trial_id], fend))
    groups = _groups(cfg, man.class_names) if prov == "corrected" else None
    rep = evaluate_many(items, groups, man.n_classes, cfg.eval.exclude_nominal, prov)
    rep.meta = {"stamp": cfg.stamp(), "n_test_trials": len(test), "classifier": model_dir.name}
    return rep


def stage_eval(cfg: PipelineConfig, ws: Workspace, jobs: int = 1, labels: str | None = None) -> dict:
    man, trials = _load_data(ws)
    provs = [labels] if labels else ["baseline", "relabeled", "corrected"]
    reports = {p: evaluate_provenance(cfg, ws, p, man, trials) for p in provs}
    out = ws.root / "eval"
    for p, r in reports.items():
        r.write(out, p)
        write_json(out / f"{p}_per_class.json", per_class_table(r, man.class_names))
    summary: dict = {"stamp": cfg.stamp(), "macro_f1": {p: r.macro_f1 for p, r in reports.items()}}
    if "baseline" in reports:
        summary["deltas"] = compare_reports(reports, "baseline")
    write_json(out / "summary.json", summary)
    return summary["macro_f1"]


def stage_leak_study(cfg: PipelineConfig, ws: Workspace, jobs: int = 1) -> dict:
    model = _load_model(ws)
    sim = cfg.sim_config()
    if model.parameter_names != sim.scenario.sensor_names or model.n_timesteps != sim.scenario.n_timesteps:
        raise DatasetError("leak study needs a nominal model fitted on simulator data")
    lcfg = replace(cfg.leak_study, seed_bank=cfg.leak_study.seed_bank + cfg.seed)
    rows = leak_study(model, sim, lcfg, jobs)
    table = dict(leak_table(rows), stamp=cfg.stamp(), config=asdict(lcfg))
    out = ws.root / "studies"
    write_json(out / "leak.json", table)
    br = [r for r in rows if r.bracketed]
    if br:
        line_plot(out / "leak", [r.start_time for r in br],
                  {"min_detectable_log10_leak": [r.min_detectable_log10 for r in br]},
                  title=f"Minimum detectable leak, {lcfg.component}", xlabel="leak start time [s]",
                  ylabel="log10 leak fraction")
    return {"bracketed": len(br), "monotonicity": table["monotonicity"]}


def stage_window_study(cfg: PipelineConfig, ws: Workspace, jobs: int = 1) -> dict:
    wcfg = replace(cfg.window_study, base_seed=cfg.window_study.base_seed + cfg.seed)
    rows = window_size_study(wcfg)
    trends = {format(d, "g"): spearman_trend(rows, d) for d in wcfg.durations}
    out = ws.root / "studies"
    write_json(out / "window.json", {"stamp": cfg.stamp(), "rows": rows, "spearman_f1_vs_T": trends,
                                     "config": asdict(wcfg)})
    series = {}
    for d in wcfg.durations:
        f1 = [next(r["f1"] for r in rows if r["duration"] == d and r["window"] == T) for T in wcfg.window_sizes]
        series[f"duration {d:g}"] = [np.nan if v is None else v for v in f1]
    line_plot(out / "window", list(wcfg.window_sizes), series, title="Detection F1 vs window size",
              xlabel="window size T", ylabel="timestep F1")
    return {"trend": trends}


def stage_report(cfg: PipelineConfig, ws: Workspace, jobs: int = 1, max_trace_plots: int = 6) -> dict:
    """Collect whatever earlier stages produced into report/report.json and report.md."""
    out = ws.root / "report"
    rep: dict = {"stamp": cfg.stamp(), "sections": {}}
    sources = {
        "cutoffs": ws.model / "cutoffs.json",
        "coverage": ws.root / "relabel" / "coverage.json",
        "relabel_summary": ws.root / "relabel" / "summary.json",
        "eval": ws.root / "eval" / "summary.json",
        "leak_study": ws.root / "studies" / "leak.json",
        "window_study": ws.root / "studies" / "window.json",
    }
    for k, p in sources.items():
        if p.exists():
            d = json.loads(p.read_text())
            d.pop("stamp", None)
            if k == "relabel_summary":
                d.pop("per_trial", None)
            rep["sections"][k] = d
    if not rep["sections"]:
        raise FileNotFoundError(f"nothing to report under {ws.root}")

    if (ws.data / "manifest.json").exists() and (ws.traces / "index.json").exists():
        man, trials = read_dataset(ws.data)
        time = man.time()
        seen: set = set()
        picked = []
        for t in trials:
            if not t.is_nominal and t.class_id not in seen:
                seen.add(t.class_id)
                picked.append(t)
            if len(picked) >= max_trace_plots:
                break
        for t in picked:
            tr = DetectionTrace.from_csv(ws.traces / f"trial_{t.trial_id}.csv", t.trial_id)
            line_plot(out / f"trace_{t.trial_id}", time, {"F_ovr": tr.overall},
                      title=f"trial {t.trial_id}: {man.class_names[t.class_id]}", xlabel="time",
                      ylabel="detection fraction", shade=(t.anomaly.start_time, t.anomaly.end_time), hline=1.0)
        for p in ("baseline", "relabeled", "corrected"):
            f = ws.root / "eval" / f"{p}.json"
            if f.exists():
                cm = np.asarray(json.loads(f.read_text())["confusion"])
                heatmap(out / f"confusion_{p}", cm, man.class_names, title=f"confusion ({p} labels)")
    write_json(out / "report.json", rep)
    (out / "report.md").write_text(render_markdown(rep))
    return {"sections": sorted(rep["sections"])}


def render_markdown(rep: dict) -> str:
    s = rep["sections"]
    st = rep["stamp"]
    lines = ["# Pipeline report", "",
             f"config hash `{st['config_hash']}`, seed {st['seed']}, format version {st['format_version']}", ""]
    if "eval" in s:
        lines += ["## Classifier scores (held-out split)", "", "| labels | precision | recall | macro F1 | dF1 |",
                  "|---|---|---|---|---|"]
        deltas = s["eval"].get("deltas", {})
        for p, f1 in s["eval"]["macro_f1"].items():
            d = deltas.get(p, {})
            lines.append(f"| {p} | {_f(d.get('precision'))} | {_f(d.get('recall'))} | {_f(f1)} | "
                         f"{_f(d.get('delta_macro_f1'))} |")
        lines.append("")
    if "coverage" in s:
        c = s["coverage"]
        lines += ["## Detector coverage", "",
                  f"overall detectability {_f(c.get('overall_detectability'))}, "
                  f"nominal flagged fraction {_f(c.get('nominal_flag_fraction'))}", "",
                  "| class | trials | detectability |", "|---|---|---|"]
        for row in c["classes"].values():
            lines.append(f"| {row['name']} | {row['n_trials']} | {_f(row['detectability'])} |")
        lines.append("")
    if "leak_study" in s:
        lines += ["## Minimum detectable leak", "", "| start time | bracketed | log10 leak | note |",
                  "|---|---|---|---|"]
        for r in s["leak_study"]["rows"]:
            lines.append(f"| {r['start_time']:g} | {r['bracketed']} | {_f(r['min_detectable_log10'])} | {r['note']} |")
        lines += ["", f"monotonicity: {s['leak_study']['monotonicity']}", ""]
    if "window_study" in s:
        lines += ["## Window-size study", "", "| duration | T | F1 |", "|---|---|---|"]
        for r in s["window_study"]["rows"]:
            lines.append(f"| {r['duration']:g} | {r['window']} | {_f(r['f1'])} |")
        lines.append("")
    return "\n".join(lines) + "\n"


def _f(x) -> str:
    return "n/a" if x is None else format(float(x), ".3f")


STAGE_FUNCS: dict[str, Callable[..., dict]] = {
    "gen-gp": stage_gen_gp,
    "gen-sim": stage_gen_sim,
    "fit-nominal": stage_fit_nominal,
    "detect": stage_detect,
    "relabel": stage_relabel,
    "train": stage_train,
    "eval": stage_eval,
    "leak-study": stage_leak_study,
    "window-study": stage_window_study,
    "report": stage_report,
}


def run_stage(stage: str, cfg: PipelineConfig, ws: Workspace, jobs: int = 1, labels: str | None = None) -> dict:
    """Run one stage; on failure leave a marker and raise StageError naming the stage."""
    if stage not in STAGE_FUNCS:
        raise ValueError(f"unknown stage {stage!r}")
    ws.root.mkdir(parents=True, exist_ok=True)
    marker = ws.marker(stage)
    kw = {"labels": labels} if stage in ("train", "eval") else {}
    try:
        result = STAGE_FUNCS[stage](cfg, ws, jobs, **kw)
    except Exception as exc:
        write_json(marker, {"stage": stage, "error": f"{type(exc).__name__}: {exc}", "stamp": _safe_stamp(cfg)})
        raise StageError(stage, str(exc)) from exc
    if marker.exists():
        marker.unlink()
    logger.info("stage %s done: %s", stage, result)
    return result


def _safe_stamp(cfg: PipelineConfig) -> dict:
    try:
        return cfg.stamp()
    except Exception:  # the stamp itself may be what failed (e.g. a missing sim config)
        return {"seed": cfg.seed, "format_version": FORMAT_VERSION}


def run_pipeline(cfg: PipelineConfig, ws: Workspace, jobs: int = 1, stages: list[str] | None = None) -> dict:
    results = {}
    for stage in stages or cfg.stages:
        results[stage] = run_stage(stage, cfg, ws, jobs)
    return results

"""Detector-driven relabeling and the post-failure acceptable-confusion rule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .datastore import LabelSet, Trial

CONFUSABLE_MODES = ("fail_open", "internal_leak", "slow_opening")


@dataclass(frozen=True)
class RelabelPolicy:
    gap_close: int = 5
    min_run: int = 3

    def __post_init__(self):
        if self.gap_close < 0 or self.min_run < 0:
            raise ValueError("gap_close and min_run must be >= 0")


@dataclass(frozen=True)
class ConfusionGroups:
    groups: tuple[frozenset, ...] = ()
    applicability: str = "post_failure_only"

    def __post_init__(self):
        if self.applicability not in ("post_failure_only", "always"):
            raise ValueError(f"unknown applicability {self.applicability!r}")
        seen: set = set()
        for g in self.groups:
            if seen & set(g):
                raise ValueError("confusion groups must be disjoint")
            if 0 in g:
                raise ValueError("nominal (0) cannot belong to a confusion group")
            seen |= set(g)

    def lookup(self, n_classes: int) -> np.ndarray:
        """Group id per class; classes outside every group get a unique id."""
        gid = np.arange(n_classes) + len(self.groups)
        for k, g in enumerate(self.groups):
            for c in g:
                if not 0 <= c < n_classes:
                    raise ValueError(f"class {c} outside [0, {n_classes})")
                gid[c] = k
        return gid

    def to_dict(self) -> dict:
        return {"groups": [sorted(g) for g in self.groups], "applicability": self.applicability}

    @classmethod
    def from_dict(cls, d: dict) -> ConfusionGroups:
        return cls(tuple(frozenset(g) for g in d.get("groups", [])), d.get("applicability", "post_failure_only"))


def default_groups(class_names: Sequence[str]) -> ConfusionGroups:
    """One group per component holding its fail_open, internal_leak and slow_opening classes.

    Class names are expected as ``"<component>:<mode>"``.
    """
    by_comp: dict[str, set] = {}
    for cid, name in enumerate(class_names):
        if ":" not in name:
            continue
        comp, mode = name.split(":", 1)
        if mode in CONFUSABLE_MODES:
            by_comp.setdefault(comp, set()).add(cid)
    return ConfusionGroups(tuple(frozenset(v) for _, v in sorted(by_comp.items()) if len(v) > 1))


def runs(flags: np.ndarray) -> list[tuple[int, int]]:
    """Half-open [start, stop) intervals of consecutive True values."""
    f = np.asarray(flags, dtype=bool)
    if not f.any():
        return []
    edges = np.diff(np.concatenate([[0], f.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(edges == 1).tolist(), np.flatnonzero(edges == -1).tolist()))


def smooth_flags(flags, policy: RelabelPolicy = RelabelPolicy()) -> np.ndarray:
    """Close interior gaps of at most ``gap_close`` steps, then drop runs shorter than ``min_run``."""
    out = np.asarray(flags, dtype=bool).copy()
    rr = runs(out)
    for (_, stop), (start, _) in zip(rr, rr[1:]):
        if start - stop <= policy.gap_close:
            out[stop:start] = True
    for start, stop in runs(out):
        if stop - start < policy.min_run:
            out[start:stop] = False
    return out


def _flag_array(x) -> np.ndarray:
    # ndarray has its own unrelated .flags attribute, so only unwrap traces
    if not isinstance(x, (np.ndarray, list, tuple)) and hasattr(x, "flags"):
        x = x.flags
    return np.asarray(x, dtype=bool)


def relabel_trial(trial: Trial, flags, policy: RelabelPolicy = RelabelPolicy()) -> LabelSet:
    """Injected class on smoothed-flagged timesteps, nominal elsewhere.

    ``flags`` may be a boolean array or anything with a ``flags`` attribute
    (a DetectionTrace). Nominal trials always come back all-nominal.
    """
    f = _flag_array(flags)
    n = trial.values.shape[0]
    if f.shape != (n,):
        raise ValueError(f"trace length {f.size} does not match trial length {n}")
    labels = np.zeros(n, dtype=np.int64)
    if not trial.is_nominal:
        labels[smooth_flags(f, policy)] = trial.class_id
    return LabelSet(labels, "relabeled")


def failure_end_index(time: np.ndarray, end_time: float | None) -> int:
    """Last timestep at or before the fault end (-1 for nominal trials)."""
    if end_time is None:
        return -1
    return int(np.searchsorted(np.asarray(time), end_time, side="right") - 1)


def apply_confusion_groups(truth, pred, groups: ConfusionGroups | None, failure_end: int,
                           n_classes: int | None = None) -> np.ndarray:
    """Per-timestep correctness; group members count as correct after ``failure_end``."""
    t = np.asarray(getattr(truth, "classes", truth), dtype=np.int64)
    p = np.asarray(pred, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError("truth and prediction lengths differ")
    exact = t == p
    if groups is None or not groups.groups:
        return exact
    nc = int(max(t.max(initial=0), p.max(initial=0)) + 1) if n_classes is None else n_classes
    gid = groups.lookup(nc)
    same = gid[t] == gid[p]
    if groups.applicability == "always":
        window = np.ones_like(exact)
    else:
        window = np.arange(t.size) > failure_end
    return exact | (same & window & (t != 0))


def coverage_report(trials: Iterable[Trial], traces, time: np.ndarray, class_names: Sequence[str] | None = None,
                    threshold: float = 0.5) -> dict:
    """Per class: share of trials with at least one flag inside the injected interval."""
    per: dict[int, list[bool]] = {}
    time = np.asarray(time)
    for trial, tr in zip(trials, traces):
        if trial.is_nominal:
            continue
        f = _flag_array(tr)
        inside = injected_mask(time, trial.anomaly.start_time, trial.anomaly.end_time)
        per.setdefault(trial.class_id, []).append(bool((f & inside).any()))
    table = {}
    for cid in sorted(per):
        hits = per[cid]
        frac = sum(hits) / len(hits)
        table[str(cid)] = {
            "class_id": cid,
            "name": class_names[cid] if class_names is not None else str(cid),
            "n_trials": len(hits),
            "detected": sum(hits),
            "detectability": frac,
            "needs_adjustment": frac < threshold,
        }
    return table


def injected_mask(time: np.ndarray, start: float, end: float) -> np.ndarray:
    """Timesteps inside [start, end]; the nearest one if the interval falls between samples."""
    m = (time >= start) & (time <= end)
    if not m.any():
        m[int(np.argmin(np.abs(time - start)))] = True
    return m


@dataclass
class RelabelSummary:
    n_trials: int = 0
    changed_timesteps: int = 0
    extended: int = 0  # timesteps newly labeled anomalous
    contracted: int = 0  # baseline anomaly timesteps returned to nominal
    per_trial: dict = field(default_factory=dict)


def summarize_relabel(baseline: dict[int, LabelSet], relabeled: dict[int, LabelSet]) -> RelabelSummary:
    s = RelabelSummary()
    for tid in sorted(relabeled):
        b = baseline[tid].classes
        r = relabeled[tid].classes
        ext = int(((b == 0) & (r != 0)).sum())
        con = int(((b != 0) & (r == 0)).sum())
        s.n_trials += 1
        s.changed_timesteps += int((b != r).sum())
        s.extended += ext
        s.contracted += con
        s.per_trial[str(tid)] = {"extended": ext, "contracted": con}
    return s

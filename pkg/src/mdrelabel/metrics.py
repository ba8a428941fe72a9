"""Per-timestep multiclass scoring: confusion matrix, macro precision/recall/F1."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datastore import write_json
from .relabel import ConfusionGroups, apply_confusion_groups


@dataclass
class EvalReport:
    precision: float
    recall: float
    macro_f1: float
    confusion: np.ndarray  # rows = truth, cols = predicted
    per_class_f1: np.ndarray  # nan for classes absent from both truth and prediction
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    classes: list[int]  # classes included in the macro average
    provenance: str = "baseline"
    grouped: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def n_timesteps(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        def clean(a):
            return [None if not np.isfinite(x) else float(x) for x in a]

        return {
            "precision": self.precision,
            "recall": self.recall,
            "macro_f1": self.macro_f1,
            "confusion": self.confusion.astype(int).tolist(),
            "per_class_f1": clean(self.per_class_f1),
            "per_class_precision": clean(self.per_class_precision),
            "per_class_recall": clean(self.per_class_recall),
            "classes": list(self.classes),
            "provenance": self.provenance,
            "grouped": self.grouped,
            "n_timesteps": self.n_timesteps,
            "meta": self.meta,
        }

    def write(self, path: str | Path, stem: str = "eval") -> None:
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        write_json(root / f"{stem}.json", self.to_dict())
        write_confusion_csv(root / f"{stem}_confusion.csv", self.confusion)


def write_confusion_csv(path: str | Path, confusion: np.ndarray) -> None:
    n = confusion.shape[0]
    lines = ["truth\\pred," + ",".join(str(j) for j in range(n))]
    for i in range(n):
        lines.append(f"{i}," + ",".join(str(int(x)) for x in confusion[i]))
    Path(path).write_text("\n".join(lines) + "\n")


def confusion_matrix(truth, pred, n_classes: int) -> np.ndarray:
    t = np.asarray(truth, dtype=np.int64).ravel()
    p = np.asarray(pred, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ValueError("truth and prediction lengths differ")
    if t.size and (min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= n_classes):
        raise ValueError(f"class ids must lie in [0, {n_classes})")
    return np.bincount(t * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def scores_from_confusion(cm: np.ndarray, exclude_nominal: bool = False):
    """Per-class precision/recall/F1 and their macro averages.

    The average runs over classes that occur in the truth or the prediction;
    a class with no predictions has precision 0, one with no truth has recall 0.
    """
    cm = np.asarray(cm, dtype=float)
    tp = np.diag(cm)
    pred_n = cm.sum(axis=0)
    true_n = cm.sum(axis=1)
    active = (pred_n > 0) | (true_n > 0)
    if exclude_nominal:
        active[0] = False
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(pred_n > 0, tp / np.where(pred_n > 0, pred_n, 1), 0.0)
        rec = np.where(true_n > 0, tp / np.where(true_n > 0, true_n, 1), 0.0)
        denom = 2 * tp + (pred_n - tp) + (true_n - tp)
        f1 = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 0.0)
    prec = np.where(active, prec, np.nan)
    rec = np.where(active, rec, np.nan)
    f1 = np.where(active, f1, np.nan)
    classes = np.flatnonzero(active).tolist()
    if not classes:
        return prec, rec, f1, classes, float("nan"), float("nan"), float("nan")
    return prec, rec, f1, classes, float(np.mean(prec[active])), float(np.mean(rec[active])), float(np.mean(f1[active]))


def evaluate(pred, truth, groups: ConfusionGroups | None = None, failure_end: int = -1,
             n_classes: int | None = None, exclude_nominal: bool = False,
             provenance: str | None = None) -> EvalReport:
    """Score one prediction sequence against truth labels (a LabelSet or array)."""
    return evaluate_many([(pred, truth, failure_end)], groups, n_classes, exclude_nominal, provenance)


def evaluate_many(items: Iterable[tuple], groups: ConfusionGroups | None = None,
                  n_classes: int | None = None, exclude_nominal: bool = False,
                  provenance: str | None = None) -> EvalReport:
    """Pool timesteps over trials; ``items`` yields (pred, truth, failure_end).

    With ``groups`` a group-correct prediction is counted for the truth class.
    """
    items = list(items)
    preds, truths = [], []
    prov = provenance
    for pred, truth, fend in items:
        t = np.asarray(getattr(truth, "classes", truth), dtype=np.int64)
        p = np.asarray(pred, dtype=np.int64)
        if t.shape != p.shape:
            raise ValueError(f"length mismatch: truth {t.shape}, prediction {p.shape}")
        if prov is None:
            prov = getattr(truth, "provenance", "baseline")
        if groups is not None and groups.groups:
            ok = apply_confusion_groups(t, p, groups, fend, n_classes)
            p = np.where(ok, t, p)
        preds.append(p)
        truths.append(t)
    t_all = np.concatenate(truths) if truths else np.zeros(0, dtype=np.int64)
    p_all = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    if n_classes is None:
        n_classes = int(max(t_all.max(initial=0), p_all.max(initial=0)) + 1)
    cm = confusion_matrix(t_all, p_all, n_classes)
    prec, rec, f1, classes, P, R, F = scores_from_confusion(cm, exclude_nominal)
    return EvalReport(P, R, F, cm, f1, prec, rec, classes, prov or "baseline",
                      bool(groups is not None and groups.groups))


def compare_reports(reports: dict[str, EvalReport], reference: str = "baseline") -> dict:
    """Deltas of every report against ``reference``."""
    base = reports[reference]
    out = {}
    for name, r in reports.items():
        out[name] = {
            "precision": r.precision,
            "recall": r.recall,
            "macro_f1": r.macro_f1,
            "delta_precision": r.precision - base.precision,
            "delta_recall": r.recall - base.recall,
            "delta_macro_f1": r.macro_f1 - base.macro_f1,
        }
    return out


def per_class_table(report: EvalReport, class_names: Sequence[str] | None = None) -> list[dict]:
    rows = []
    for c in report.classes:
        rows.append({
            "class_id": c,
            "name": class_names[c] if class_names else str(c),
            "support": int(report.confusion[c].sum()),
            "precision": float(report.per_class_precision[c]),
            "recall": float(report.per_class_recall[c]),
            "f1": float(report.per_class_f1[c]),
        })
    return rows

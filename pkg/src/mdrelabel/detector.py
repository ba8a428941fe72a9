"""Windowed M-distance detection with forward/backward fusion over several scales."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .datastore import Trial
from .nominal import FamilyStats, NominalModel, windowed_distances


def window_mdist(model: NominalModel, x, p: int, w: int, family: int | FamilyStats = 0) -> float:
    """Regularized M-distance of one raw window ``x`` for parameter ``p``, window ``w``.

    ``x`` is z-scored with the model's channel statistics first. ``family`` is
    either a FamilyStats or an index into ``model.families``.
    """
    fs = model.families[family] if isinstance(family, int) else family
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("window values must be finite")
    x = (x - model.channel_mean[p]) / model.channel_std[p]
    mu = fs.mean[p, w]
    if x.shape != mu.shape:
        raise ValueError(f"window has {x.size} values, model expects {mu.size}")
    return mdist(x - mu, fs.cov[p, w], model.theta)


def mdist(diff, cov, theta: float) -> float:
    """sqrt(diff' (cov + theta^2 I)^-1 diff) via a Cholesky solve."""
    diff = np.asarray(diff, dtype=float)
    A = np.asarray(cov, dtype=float) + theta**2 * np.eye(diff.size)
    c = cho_factor(A, lower=True)
    return float(np.sqrt(max(diff @ cho_solve(c, diff), 0.0)))


def max_param_mdist(model: NominalModel, values: np.ndarray, w: int, family: int | FamilyStats = 0) -> float:
    """Largest per-parameter M-distance on window ``w`` of a (n, P) trial matrix."""
    fs = model.families[family] if isinstance(family, int) else family
    idx = fs.family.index(model.n_timesteps)[w]
    return max(window_mdist(model, values[idx, p], p, w, fs) for p in range(values.shape[1]))


def detection_fraction(d, cutoff):
    """F = d / d*. A zero cutoff gives 0 for d = 0 and inf otherwise."""
    d = np.asarray(d, dtype=float)
    cutoff = np.asarray(cutoff, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        F = np.where(cutoff > 0, d / np.where(cutoff > 0, cutoff, 1.0), np.where(d > 0, np.inf, 0.0))
    return F if F.ndim else float(F)


def fuse(backward, forward):
    """Forward/backward fusion; -1 marks a missing side (the other side is used)."""
    backward = np.asarray(backward, dtype=float)
    forward = np.asarray(forward, dtype=float)
    return np.where(backward < 0, forward, np.where(forward < 0, backward, np.minimum(backward, forward)))


@dataclass
class DetectionTrace:
    trial_id: int
    time: np.ndarray
    fb: dict[int, np.ndarray]  # family length -> F_FB per timestep
    overall: np.ndarray
    window_fractions: dict[int, np.ndarray] = field(default_factory=dict)  # per-window F (optional)

    @property
    def flags(self) -> np.ndarray:
        return self.overall > 1.0

    def __len__(self) -> int:
        return len(self.overall)

    def to_csv(self, path: str | Path) -> None:
        lengths = sorted(self.fb)
        cols = ["t", *[f"F_fb_{T}" for T in lengths], "F_ovr", "flag"]
        lines = [",".join(cols)]
        for i, t in enumerate(self.time):
            row = [format(float(t), ".17g")]
            row += [format(float(self.fb[T][i]), ".17g") for T in lengths]
            row += [format(float(self.overall[i]), ".17g"), str(int(self.overall[i] > 1.0))]
            lines.append(",".join(row))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path: str | Path, trial_id: int = 0) -> DetectionTrace:
        p = Path(path)
        header = p.open().readline().strip().split(",")
        arr = np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2)
        fb = {int(h.split("_")[-1]): arr[:, i] for i, h in enumerate(header) if h.startswith("F_fb_")}
        return cls(trial_id, arr[:, 0], fb, arr[:, header.index("F_ovr")])


def family_window_fractions(model: NominalModel, values: np.ndarray) -> dict[int, np.ndarray]:
    """Per-window detection fractions (N, W) for every family."""
    out = {}
    for fs in model.families:
        d = windowed_distances(model, fs, values).max(axis=1)
        out[fs.family.length] = detection_fraction(d, fs.cutoff[None, :])
    return out


def fb_fractions(model: NominalModel, window_F: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Map per-window fractions to per-timestep fused fractions, (N, n) per family."""
    n = model.n_timesteps
    out = {}
    for fs in model.families:
        F = window_F[fs.family.length]
        bwd, fwd = fs.family.timestep_windows(n)
        Fb = np.where(bwd >= 0, F[:, np.maximum(bwd, 0)], -1.0)
        Ff = np.where(fwd >= 0, F[:, np.maximum(fwd, 0)], -1.0)
        out[fs.family.length] = fuse(Fb, Ff)
    return out


def fb_fraction(model: NominalModel, values: np.ndarray, t: int, T: int) -> float:
    """Fused fraction at a single timestep, computed window by window."""
    fs = model.family(T)
    n = model.n_timesteps
    bwd, fwd = fs.family.timestep_windows(n)
    sides = []
    for w in (bwd[t], fwd[t]):
        if w >= 0:
            sides.append(detection_fraction(max_param_mdist(model, values, int(w), fs), fs.cutoff[w]))
    return float(min(sides))


def overall_fraction(model: NominalModel, values: np.ndarray, t: int) -> float:
    return max(fb_fraction(model, values, t, fs.family.length) for fs in model.families)


def detect_batch(model: NominalModel, trials: Sequence[Trial], time: np.ndarray | None = None,
                 keep_windows: bool = False) -> list[DetectionTrace]:
    """Detection traces for many trials at once (vectorised over trials)."""
    trials = list(trials)
    if not trials:
        return []
    n = model.n_timesteps
    time = np.arange(n, dtype=float) if time is None else np.asarray(time)
    X = np.stack([t.values for t in trials])
    wF = family_window_fractions(model, X)
    fb = fb_fractions(model, wF)
    overall = np.max(np.stack(list(fb.values())), axis=0)
    traces = []
    for i, t in enumerate(trials):
        traces.append(DetectionTrace(
            t.trial_id, time,
            {T: v[i] for T, v in fb.items()},
            overall[i],
            {T: v[i] for T, v in wF.items()} if keep_windows else {},
        ))
    return traces


def detect_trial(model: NominalModel, trial: Trial, time: np.ndarray | None = None,
                 keep_windows: bool = False) -> DetectionTrace:
    return detect_batch(model, [trial], time, keep_windows)[0]


def detect_many(model: NominalModel, trials: Sequence[Trial], time: np.ndarray | None = None,
                chunk: int = 32) -> list[DetectionTrace]:
    """detect_batch in fixed-size chunks to bound memory."""
    trials = list(trials)
    out: list[DetectionTrace] = []
    for i in range(0, len(trials), chunk):
        out.extend(detect_batch(model, trials[i:i + chunk], time))
    return out

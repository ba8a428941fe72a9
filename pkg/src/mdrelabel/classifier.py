"""Reference per-timestep classifier: multinomial logistic regression on window features.

Each timestep is predicted by exactly one staggered window of ``window_len``
steps (the one holding it in its last ``predict_tail`` positions; the first
window also covers its head). Features for timestep t are computed on the part
of that window up to and including t, so prediction is causal.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datastore import FORMAT_VERSION, DatasetError, LabelSet, Trial

logger = logging.getLogger(__name__)

FEATURES = ("value", "residual", "residual_abs", "window_mean", "window_slope", "first_diff")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class ClassifierConfig:
    window_len: int = 100
    predict_tail: int = 50
    learning_rate: float = 3e-4
    epochs: int = 10
    batch_size: int = 256
    seed: int = 0
    model_kind: str = "window_logistic"
    l2: float = 0.0
    time_bins: int = 8  # >1 gives every feature a separate weight per run segment
    class_weighting: str = "inverse_sqrt"  # "inverse_frequency", "inverse_sqrt" or "none"

    def validate(self) -> None:
        if not 1 <= self.predict_tail <= self.window_len:
            raise ValueError("predict_tail must lie in [1, window_len]")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.model_kind != "window_logistic":
            raise ValueError("only the window_logistic reference model is built in")
        if self.class_weighting not in ("inverse_frequency", "inverse_sqrt", "none"):
            raise ValueError(f"unknown class_weighting {self.class_weighting!r}")


# -- splitting ------------------------------------------------------------------


def split_of(trial_id: int) -> str:
    """Stable 80/10/10 assignment from a hash of the trial id."""
    h = int(hashlib.sha256(str(int(trial_id)).encode()).hexdigest(), 16) % 10
    return "train" if h < 8 else ("val" if h == 8 else "test")


def split_trials(trials: Sequence[Trial]) -> dict[str, list[Trial]]:
    out: dict[str, list[Trial]] = {"train": [], "val": [], "test": []}
    for t in trials:
        out[split_of(t.trial_id)].append(t)
    return out


# -- features -------------------------------------------------------------------


def window_starts(n: int, window_len: int, predict_tail: int) -> np.ndarray:
    """Start of the staggered window that predicts each timestep."""
    if n < window_len:
        return np.zeros(n, dtype=np.int64)
    t = np.arange(n)
    s = ((t - (window_len - predict_tail)) // predict_tail) * predict_tail
    return np.clip(s, 0, n - window_len)


@dataclass
class Normalizer:
    mean: np.ndarray  # (P,) global channel mean
    std: np.ndarray  # (P,) global channel std
    ref_mean: np.ndarray  # (n, P) nominal mean trace
    ref_std: np.ndarray  # (n, P) nominal std trace

    @classmethod
    def fit(cls, trials: Sequence[Trial]) -> Normalizer:
        X = np.stack([t.values for t in trials])
        nom = [t for t in trials if t.is_nominal]
        R = np.stack([t.values for t in nom]) if len(nom) >= 2 else X
        flat = X.reshape(-1, X.shape[-1])
        std = flat.std(axis=0)
        ref_std = R.std(axis=0)
        floor = 1e-3 * np.where(std > 0, std, 1.0)
        return cls(flat.mean(axis=0), np.where(std > 0, std, 1.0), R.mean(axis=0), np.maximum(ref_std, floor))


def signed_log(x):
    return np.sign(x) * np.log1p(np.abs(x))


def trial_features(values: np.ndarray, norm: Normalizer, cfg: ClassifierConfig) -> np.ndarray:
    """(n, P * len(FEATURES)) feature matrix for one trial."""
    n, P = values.shape
    z = (values - norm.mean) / norm.std
    r = signed_log((values - norm.ref_mean[:n]) / norm.ref_std[:n])
    s = window_starts(n, cfg.window_len, cfg.predict_tail)
    t = np.arange(n)
    m = (t - s + 1).astype(float)[:, None]
    zero = np.zeros((1, P))
    c1 = np.vstack([zero, np.cumsum(r, axis=0)])
    cu = np.vstack([zero, np.cumsum(r * t[:, None], axis=0)])
    sum_r = c1[t + 1] - c1[s]
    sum_ur = cu[t + 1] - cu[s]
    mean = sum_r / m
    # least-squares slope against the in-window index i = u - s
    sum_ir = sum_ur - s[:, None] * sum_r
    i_mean = (m - 1) / 2
    sxx = m * (m * m - 1) / 12
    with np.errstate(invalid="ignore", divide="ignore"):
        slope = np.where(m > 1, (sum_ir - m * i_mean * mean) / np.where(m > 1, sxx, 1.0), 0.0)
    diff = np.vstack([zero, np.diff(z, axis=0)])
    diff[s == t] = 0.0  # first point of a window has no in-window predecessor
    return np.concatenate([z, r, np.abs(r), mean, slope, diff], axis=1)


def time_segments(n: int, bins: int) -> np.ndarray:
    """Equal-length run segment of every timestep; each segment has its own weights."""
    return np.minimum(np.arange(n) * bins // n, bins - 1)


# -- model ------------------------------------------------------------------------


@dataclass
class ClassifierModel:
    config: ClassifierConfig
    n_classes: int
    parameter_names: list[str]
    norm: Normalizer
    weights: np.ndarray  # (time_bins, F + 1, C), last row of each block is the bias
    feat_mean: np.ndarray  # (F,)
    feat_std: np.ndarray  # (F,)
    history: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def logits(self, feats: np.ndarray, seg: np.ndarray | None = None) -> np.ndarray:
        f = (feats - self.feat_mean) / self.feat_std
        if seg is None:
            seg = time_segments(len(f), self.weights.shape[0])
        return _logits(self.weights, f, seg)

    def save(self, path: str | Path) -> Path:
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        np.save(root / "weights.npy", self.weights)
        np.save(root / "feat_mean.npy", self.feat_mean)
        np.save(root / "feat_std.npy", self.feat_std)
        np.save(root / "norm_mean.npy", self.norm.mean)
        np.save(root / "norm_std.npy", self.norm.std)
        np.save(root / "ref_mean.npy", self.norm.ref_mean)
        np.save(root / "ref_std.npy", self.norm.ref_std)
        head = {
            "format_version": FORMAT_VERSION,
            "config": asdict(self.config),
            "n_classes": self.n_classes,
            "parameter_names": self.parameter_names,
            "features": list(FEATURES),
            "history": self.history,
            "meta": self.meta,
        }
        (root / "classifier.json").write_text(json.dumps(head, indent=2, sort_keys=True) + "\n")
        return root

    @classmethod
    def load(cls, path: str | Path) -> ClassifierModel:
        root = Path(path)
        head_path = root / "classifier.json"
        if not head_path.exists():
            raise FileNotFoundError(f"no classifier at {root} (missing {head_path.name})")
        h = json.loads(head_path.read_text())
        norm = Normalizer(*(np.load(root / f"{k}.npy") for k in ("norm_mean", "norm_std", "ref_mean", "ref_std")))
        return cls(ClassifierConfig(**h["config"]), int(h["n_classes"]), list(h["parameter_names"]), norm,
                   np.load(root / "weights.npy"), np.load(root / "feat_mean.npy"), np.load(root / "feat_std.npy"),
                   h.get("history", {}), h.get("meta", {}))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _logits(weights: np.ndarray, F: np.ndarray, seg: np.ndarray) -> np.ndarray:
    out = np.empty((len(F), weights.shape[2]))
    for b in range(weights.shape[0]):
        rows = seg == b
        if rows.any():
            out[rows] = F[rows] @ weights[b, :-1] + weights[b, -1]
    return out


def _loss(weights: np.ndarray, F: np.ndarray, seg: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    p = softmax(_logits(weights, F, seg))
    ll = -np.log(np.maximum(p[np.arange(len(y)), y], 1e-300))
    return float(np.sum(w[y] * ll) / np.sum(w[y]))


def _design(trials: Sequence[Trial], labels: dict[int, LabelSet] | None, norm: Normalizer,
            cfg: ClassifierConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    feats, segs, ys = [], [], []
    for t in trials:
        f = trial_features(t.values, norm, cfg)
        feats.append(f)
        segs.append(time_segments(len(f), cfg.time_bins))
        ls = labels[t.trial_id] if labels is not None else t.labels
        ys.append(ls.classes)
    return np.concatenate(feats), np.concatenate(segs), np.concatenate(ys).astype(np.int64)


def class_weights(y: np.ndarray, n_classes: int, how: str) -> np.ndarray:
    """Inverse-frequency weights (optionally square-rooted), mean 1 over present classes."""
    counts = np.bincount(y, minlength=n_classes).astype(float)
    if how == "none":
        return np.ones(n_classes)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    if how == "inverse_sqrt":
        inv = np.sqrt(inv)
    present = counts > 0
    return inv / inv[present].mean() if present.any() else inv


def train(trials: Sequence[Trial], labels: dict[int, LabelSet] | None, config: ClassifierConfig,
          n_classes: int, parameter_names: Sequence[str] | None = None,
          splits: dict[str, list[Trial]] | None = None) -> ClassifierModel:
    """Fit the reference model on the train split with Adam on weighted cross-entropy.

    ``labels`` maps trial_id to the LabelSet to learn (None means the baseline
    labels stored on the trials).
    """
    config.validate()
    splits = splits or split_trials(trials)
    tr, va = splits["train"], splits["val"]
    if not tr:
        raise DatasetError("empty training split")
    if not va:
        raise DatasetError("empty validation split")
    norm = Normalizer.fit(tr)
    Xtr, str_, ytr = _design(tr, labels, norm, config)
    Xva, sva, yva = _design(va, labels, norm, config)
    fmean = Xtr.mean(axis=0)
    fstd = Xtr.std(axis=0)
    fstd = np.where(fstd > 0, fstd, 1.0)
    Xtr = (Xtr - fmean) / fstd
    Xva = (Xva - fmean) / fstd
    cw = class_weights(ytr, n_classes, config.class_weighting)

    nf = Xtr.shape[1]
    W = np.zeros((config.time_bins, nf + 1, n_classes))
    rng = np.random.default_rng(config.seed)
    m = np.zeros_like(W)
    v = np.zeros_like(W)
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    hist = {"train_loss": [_loss(W, Xtr, str_, ytr, cw)], "val_loss": [_loss(W, Xva, sva, yva, cw)]}
    for epoch in range(config.epochs):
        order = rng.permutation(len(ytr))
        for bi in range(0, len(order), config.batch_size):
            idx = order[bi:bi + config.batch_size]
            xb, sb, yb = Xtr[idx], str_[idx], ytr[idx]
            wb = cw[yb]
            g = softmax(_logits(W, xb, sb))
            g[np.arange(len(yb)), yb] -= 1.0
            g *= (wb / max(wb.sum(), 1e-300))[:, None]
            grad = np.zeros_like(W)
            for b in range(config.time_bins):
                rows = sb == b
                if rows.any():
                    grad[b, :-1] = xb[rows].T @ g[rows]
                    grad[b, -1] = g[rows].sum(axis=0)
            grad[:, :-1] += config.l2 * W[:, :-1]
            if not np.all(np.isfinite(grad)):
                raise TrainingDivergedError(
                    f"non-finite gradient in epoch {epoch}, batch {bi // config.batch_size}"
                )
            step += 1
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad * grad
            mhat = m / (1 - b1**step)
            vhat = v / (1 - b2**step)
            W = W - config.learning_rate * mhat / (np.sqrt(vhat) + eps)
        tl = _loss(W, Xtr, str_, ytr, cw)
        vl = _loss(W, Xva, sva, yva, cw)
        if not (np.isfinite(tl) and np.isfinite(vl)):
            raise TrainingDivergedError(f"non-finite loss after epoch {epoch}")
        hist["train_loss"].append(tl)
        hist["val_loss"].append(vl)
        logger.info("epoch %d train %.4f val %.4f", epoch, tl, vl)
    meta = {"class_weights": cw.tolist(), "n_train_trials": len(tr), "n_val_trials": len(va)}
    return ClassifierModel(config, n_classes, list(parameter_names or []), norm, W, fmean, fstd, hist, meta)


def predict(model: ClassifierModel, trial: Trial | np.ndarray) -> np.ndarray:
    """(n, n_classes) class probabilities; every row sums to 1."""
    values = trial.values if isinstance(trial, Trial) else np.asarray(trial, dtype=float)
    if model.parameter_names and values.shape[1] != len(model.parameter_names):
        raise DatasetError("trial channels do not match the classifier")
    return softmax(model.logits(trial_features(values, model.norm, model.config)))


def predict_labels(model: ClassifierModel, trial: Trial | np.ndarray) -> np.ndarray:
    return np.argmax(predict(model, trial), axis=1)

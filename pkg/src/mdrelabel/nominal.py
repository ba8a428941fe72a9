"""Nominal ensemble statistics and adaptive M-distance cutoffs."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .datastore import FORMAT_VERSION, DatasetError, Trial, stack_values

DEFAULT_THETA = 1e-4
DEFAULT_PSTAR = 0.99
WINDOW_CHUNK = 64  # windows whitened at a time; bounds peak memory


@dataclass(frozen=True)
class WindowFamily:
    """Fixed-length windows of ``length`` timesteps placed every ``stride`` steps.

    With ``subsample`` > 1 only every ``subsample``-th point inside a window is
    used, which shrinks the covariance to ``ceil(length / subsample)`` square.
    """

    length: int
    stride: int = 1
    subsample: int = 1

    def __post_init__(self):
        if self.length < 1 or self.stride < 1 or self.subsample < 1:
            raise ValueError("length, stride and subsample must be >= 1")

    @property
    def name(self) -> str:
        return str(self.length)

    @property
    def dim(self) -> int:
        return len(range(0, self.length, self.subsample))

    def starts(self, n: int) -> np.ndarray:
        """Window start indices; the last window is clamped to end at ``n``."""
        if self.length > n:
            raise ValueError(f"window length {self.length} exceeds sequence length {n}")
        s = np.arange(0, n - self.length + 1, self.stride)
        if s[-1] != n - self.length:
            s = np.append(s, n - self.length)
        return s

    def index(self, n: int) -> np.ndarray:
        """(n_windows, dim) timestep indices of every window."""
        return self.starts(n)[:, None] + np.arange(0, self.length, self.subsample)[None, :]

    def window_at(self, start: int, n: int) -> int:
        """Index of the grid window whose start is nearest at or below ``start``."""
        s = self.starts(n)
        return int(np.searchsorted(s, start, side="right") - 1)

    def timestep_windows(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Backward and forward window index per timestep (-1 where absent).

        T = 1 uses the point window for both sides. For T > 1 the backward
        window covers [t-T, t) and the forward window (t, t+T].
        """
        t = np.arange(n)
        s = self.starts(n)
        snap = lambda ideal: np.searchsorted(s, ideal, side="right") - 1  # noqa: E731
        if self.length == 1:
            w = snap(t)
            return w, w.copy()
        T = self.length
        bwd = np.where(t - T >= 0, snap(np.maximum(t - T, 0)), -1)
        fwd = np.where(t + T <= n - 1, snap(np.minimum(t + 1, n - T)), -1)
        # sequences shorter than 2T+1 leave some timesteps with neither side
        lonely = (bwd < 0) & (fwd < 0)
        if lonely.any():
            mid = snap(np.clip(t - T // 2, 0, n - T))
            bwd = np.where(lonely, mid, bwd)
        return bwd, fwd

    def to_dict(self) -> dict:
        return asdict(self)


def default_families(subsample_long: bool = False) -> tuple[WindowFamily, ...]:
    return (
        WindowFamily(1),
        WindowFamily(20),
        WindowFamily(100, stride=5, subsample=5 if subsample_long else 1),
    )


@dataclass
class FamilyStats:
    """Window statistics in channel-normalized units."""

    family: WindowFamily
    mean: np.ndarray  # (P, W, D)
    cov: np.ndarray  # (P, W, D, D), unbiased sample covariance, never regularized
    cutoff: np.ndarray  # (W,)
    _whiten: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_windows(self) -> int:
        return self.mean.shape[1]


@dataclass
class NominalModel:
    families: list[FamilyStats]
    theta: float
    pstar: float
    n_nominal: int
    n_timesteps: int
    parameter_names: list[str]
    channel_mean: np.ndarray  # (P,) raw values are z-scored with these before any
    channel_std: np.ndarray  # (P,) window statistic, so theta is dimensionless
    meta: dict = field(default_factory=dict)

    @property
    def n_parameters(self) -> int:
        return len(self.parameter_names)

    def family(self, length: int) -> FamilyStats:
        for f in self.families:
            if f.family.length == length:
                return f
        raise KeyError(f"no window family of length {length}")

    def whiteners(self, fs: FamilyStats) -> np.ndarray:
        """Inverse Cholesky factors of (cov + theta^2 I), cached per family."""
        if fs._whiten is None:
            fs._whiten = whitening_factors(fs.cov, self.theta)
        return fs._whiten

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return (values - self.channel_mean) / self.channel_std

    # -- persistence -------------------------------------------------------

    def header(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "theta": self.theta,
            "pstar": self.pstar,
            "n_nominal": self.n_nominal,
            "n_timesteps": self.n_timesteps,
            "parameter_names": list(self.parameter_names),
            "families": [f.family.to_dict() for f in self.families],
            "channel_mean": [float(x) for x in self.channel_mean],
            "channel_std": [float(x) for x in self.channel_std],
            "meta": self.meta,
        }

    def save(self, path: str | Path) -> Path:
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        for fs in self.families:
            tag = f"T{fs.family.length}"
            np.save(root / f"{tag}_mean.npy", fs.mean)
            np.save(root / f"{tag}_cov.npy", fs.cov)
            np.save(root / f"{tag}_cutoff.npy", fs.cutoff)
        (root / "model.json").write_text(json.dumps(self.header(), indent=2, sort_keys=True) + "\n")
        return root

    @classmethod
    def load(cls, path: str | Path) -> NominalModel:
        root = Path(path)
        head = root / "model.json"
        if not head.exists():
            raise FileNotFoundError(f"no nominal model at {root} (missing {head.name})")
        h = json.loads(head.read_text())
        if int(h.get("format_version", -1)) > FORMAT_VERSION:
            raise DatasetError(f"model format_version {h['format_version']} is newer than supported")
        fams = []
        for fd in h["families"]:
            fam = WindowFamily(**fd)
            tag = f"T{fam.length}"
            fams.append(FamilyStats(
                fam,
                np.load(root / f"{tag}_mean.npy"),
                np.load(root / f"{tag}_cov.npy"),
                np.load(root / f"{tag}_cutoff.npy"),
            ))
        return cls(fams, float(h["theta"]), float(h["pstar"]), int(h["n_nominal"]),
                   int(h["n_timesteps"]), list(h["parameter_names"]),
                   np.asarray(h["channel_mean"], dtype=float), np.asarray(h["channel_std"], dtype=float),
                   h.get("meta", {}))


def whitening_factors(cov: np.ndarray, theta: float) -> np.ndarray:
    """Batched inverse lower Cholesky factors of ``cov + theta^2 I``.

    ``d = ||Linv (x - mu)||`` then equals the regularized M-distance.
    """
    D = cov.shape[-1]
    eye = np.eye(D)
    out = np.empty_like(cov)
    flat = cov.reshape(-1, D, D)
    oflat = out.reshape(-1, D, D)
    for i in range(0, flat.shape[0], WINDOW_CHUNK):
        A = flat[i:i + WINDOW_CHUNK] + theta**2 * eye
        try:
            L = np.linalg.cholesky(A)
            oflat[i:i + WINDOW_CHUNK] = np.linalg.solve(L, np.broadcast_to(eye, L.shape))
        except np.linalg.LinAlgError:
            # rounding can leave a rank-deficient covariance slightly indefinite
            lam, V = np.linalg.eigh(flat[i:i + WINDOW_CHUNK])
            lam = np.maximum(lam, 0.0) + theta**2
            oflat[i:i + WINDOW_CHUNK] = np.swapaxes(V, -1, -2) / np.sqrt(lam)[..., :, None]
    return out


def windowed_distances(model: NominalModel, fs: FamilyStats, values: np.ndarray) -> np.ndarray:
    """Per-parameter M-distances on every window.

    ``values`` is (N, n_timesteps, P); the result is (N, P, W).
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 2:
        values = values[None]
    N, n, P = values.shape
    if n != model.n_timesteps or P != model.n_parameters:
        raise DatasetError(
            f"trial shape ({n}, {P}) does not match model ({model.n_timesteps}, {model.n_parameters})"
        )
    values = model.normalize(values)
    idx = fs.family.index(n)
    Linv = model.whiteners(fs)
    out = np.empty((N, P, idx.shape[0]))
    for p in range(P):
        for w0 in range(0, idx.shape[0], WINDOW_CHUNK):
            sl = slice(w0, w0 + WINDOW_CHUNK)
            diff = values[:, idx[sl], p] - fs.mean[p, sl][None]  # (N, w, D)
            z = np.einsum("wij,nwj->nwi", Linv[p, sl], diff)
            out[:, p, sl] = np.sqrt(np.einsum("nwi,nwi->nw", z, z))
    return out


def nearest_rank(values: np.ndarray, q: float, axis: int = 0) -> np.ndarray:
    """The ceil(q*N)-th smallest value along ``axis`` (1-based rank)."""
    N = values.shape[axis]
    k = min(max(math.ceil(q * N - 1e-9), 1), N)
    return np.sort(values, axis=axis).take(k - 1, axis=axis)


def fit_nominal(trials: Sequence[Trial], families: Sequence[WindowFamily] | None = None,
                theta: float = DEFAULT_THETA, pstar: float = DEFAULT_PSTAR,
                parameter_names: Sequence[str] | None = None) -> NominalModel:
    """Fit window means/covariances and in-sample nearest-rank cutoffs."""
    trials = list(trials)
    if len(trials) < 2:
        raise DatasetError(f"need at least 2 nominal trials, got {len(trials)}")
    bad = [t.trial_id for t in trials if not t.is_nominal or np.any(t.labels.classes != 0)]
    if bad:
        raise DatasetError(f"anomalous trials passed to fit_nominal: {bad[:10]}")
    if not theta > 0:
        raise ValueError("theta must be positive")
    if not 0 < pstar < 1:
        raise ValueError("pstar must lie in (0, 1)")
    shapes = {t.values.shape for t in trials}
    if len(shapes) != 1:
        raise DatasetError(f"nominal trials disagree on shape: {sorted(shapes)}")
    X = stack_values(trials)  # (N, n, P)
    N, n, P = X.shape
    families = list(default_families() if families is None else families)
    names = list(parameter_names) if parameter_names else [f"p{i}" for i in range(P)]

    flat = X.reshape(-1, P)
    mean_c = flat.mean(axis=0)
    std_c = flat.std(axis=0)
    std_c = np.where(std_c > 0, std_c, 1.0)

    model = NominalModel([], theta, pstar, N, n, names, mean_c, std_c)
    Z = model.normalize(X)
    for fam in families:
        idx = fam.index(n)
        W, D = idx.shape
        mean = np.empty((P, W, D))
        cov = np.empty((P, W, D, D))
        for p in range(P):
            xw = Z[:, idx, p]  # (N, W, D)
            mu = xw.mean(axis=0)
            c = xw - mu
            mean[p] = mu
            cov[p] = np.einsum("nwi,nwj->wij", c, c) / (N - 1)
        fs = FamilyStats(fam, mean, cov, np.zeros(W))
        model.families.append(fs)
        d = windowed_distances(model, fs, X).max(axis=1)  # (N, W)
        fs.cutoff = nearest_rank(d, pstar, axis=0)
    return model


def gaussian_cutoff(dim: int, n_parameters: int, pstar: float) -> float:
    """P*-quantile of the max of ``n_parameters`` independent chi(dim) variables."""
    return float(stats.chi.ppf(pstar ** (1.0 / n_parameters), dim))


def cutoff_report(model: NominalModel) -> list[dict]:
    """Per window: empirical cutoff, Gaussian chi reference and their ratio."""
    rows = []
    for fs in model.families:
        ref = gaussian_cutoff(fs.family.dim, model.n_parameters, model.pstar)
        starts = fs.family.starts(model.n_timesteps)
        for w, (s, c) in enumerate(zip(starts, fs.cutoff)):
            rows.append({
                "family": fs.family.length,
                "window": w,
                "start": int(s),
                "cutoff": float(c),
                "gaussian_cutoff": ref,
                "ratio": float(c) / ref,
            })
    return rows

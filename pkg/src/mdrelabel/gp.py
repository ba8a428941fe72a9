"""Zero-mean Gaussian-process validation data with known anomaly windows.

The nominal kernel is a quadratic polynomial in time; the anomalous kernel adds
a periodic component switched on by a triangular window ``W`` on ``[a, b]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .datastore import AnomalyMeta, DatasetManifest, LabelSet, Trial, interval_labels

logger = logging.getLogger(__name__)

MAX_JITTER = 1e-6
GP_CLASS_NAMES = ["nominal", "gp_anomaly"]


class IndefiniteKernelError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "nominal"
    window_a: float = 0.0
    window_b: float = 1.0
    anomaly_amplitude: float = 0.3
    anomaly_frequency: float = 10.0 * math.pi
    jitter: float = 1e-10

    def __post_init__(self):
        if self.kind not in ("nominal", "anomalous"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "anomalous" and not self.window_a < self.window_b:
            raise ValueError("window_a must be below window_b")
        if self.anomaly_amplitude < 0:
            raise ValueError("anomaly_amplitude must be non-negative")
        if not self.jitter > 0:
            raise ValueError("jitter must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> KernelSpec:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def nominal_kernel(t, t2):
    t = np.asarray(t, dtype=float)
    t2 = np.asarray(t2, dtype=float)
    tt = t * t2
    return 0.3 + 0.4 * tt + 3.0 * tt**2 + t * t2**2 + t2 * t**2


def window_weight(t, a: float, b: float):
    """Triangular bump: 1 at the window centre, 0 at and beyond its edges."""
    t = np.asarray(t, dtype=float)
    return np.maximum(1.0 - np.abs(2.0 * t - (a + b)) / (b - a), 0.0)


def kernel_eval(spec: KernelSpec, t, t2):
    """Covariance between times ``t`` and ``t2`` (broadcasts over arrays)."""
    k = nominal_kernel(t, t2)
    if spec.kind == "anomalous" and spec.anomaly_amplitude > 0:
        w = window_weight(t, spec.window_a, spec.window_b) * window_weight(t2, spec.window_a, spec.window_b)
        diff = np.asarray(t, dtype=float) - np.asarray(t2, dtype=float)
        k = k + spec.anomaly_amplitude * w * np.exp(-2.0 * np.sin(spec.anomaly_frequency * diff) ** 2)
    return k


def _check_grid(grid) -> np.ndarray:
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or g.size == 0:
        raise ValueError("grid must be a non-empty 1-D array")
    if g.size > 1 and not np.all(np.diff(g) > 0):
        raise ValueError("grid must be strictly increasing")
    return g


def gram_matrix(spec: KernelSpec, grid, jitter: float | None = None) -> np.ndarray:
    """Kernel matrix on ``grid`` with ``jitter`` added to the diagonal."""
    g = _check_grid(grid)
    K = kernel_eval(spec, g[:, None], g[None, :])
    K = 0.5 * (K + K.T)  # exact symmetry regardless of rounding in the sine term
    K[np.diag_indices_from(K)] += spec.jitter if jitter is None else jitter
    return K


_FACTOR_CACHE: dict = {}


def cholesky_factor(spec: KernelSpec, grid) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor, escalating the jitter by 10x up to 1e-6."""
    g = _check_grid(grid)
    key = (spec, g.tobytes())
    if key in _FACTOR_CACHE:
        return _FACTOR_CACHE[key]
    jitter = spec.jitter
    while True:
        try:
            L = np.linalg.cholesky(gram_matrix(spec, g, jitter))
            break
        except np.linalg.LinAlgError:
            if jitter * 10 > MAX_JITTER * (1 + 1e-12):
                raise IndefiniteKernelError(
                    f"kernel matrix not positive definite even with jitter {jitter:g}"
                ) from None
            jitter *= 10
            logger.debug("raising GP jitter to %g", jitter)
    if len(_FACTOR_CACHE) > 8:
        _FACTOR_CACHE.clear()
    _FACTOR_CACHE[key] = (L, jitter)
    return L, jitter


def sample_gp(spec: KernelSpec, grid, seed: int, n_channels: int | None = None) -> np.ndarray:
    """One zero-mean draw ``L @ z`` with ``z`` from ``default_rng(seed)``.

    With ``n_channels`` the result is (n, n_channels) of independent channels;
    channel 0 equals the single-channel draw for the same seed.
    """
    L, _ = cholesky_factor(spec, grid)
    rng = np.random.default_rng(seed)
    if n_channels is None:
        return L @ rng.standard_normal(L.shape[0])
    z = rng.standard_normal((n_channels, L.shape[0]))
    return (z @ L.T).T


def default_grid(n: int = 1000) -> np.ndarray:
    """``n`` uniform points on [0, 1], laid out the same way as manifest time."""
    if n < 2:
        raise ValueError("grid needs at least 2 points")
    return np.arange(n) * (1.0 / (n - 1))


def make_gp_trial(spec: KernelSpec, grid, seed: int, trial_id: int = 0, class_id: int = 1,
                  n_channels: int = 1) -> Trial:
    """Sample a trial whose baseline labels mark the kernel's anomaly window."""
    g = _check_grid(grid)
    meta = None
    if spec.kind == "anomalous":
        if spec.window_a < g[0] or spec.window_b > g[-1]:
            raise ValueError(
                f"anomaly window [{spec.window_a}, {spec.window_b}] outside grid [{g[0]}, {g[-1]}]"
            )
        meta = AnomalyMeta(class_id, "gp", "gp_window", float(spec.window_a), float(spec.window_b),
                           {"amplitude": spec.anomaly_amplitude})
    values = sample_gp(spec, g, seed, n_channels=n_channels)
    labels = LabelSet(interval_labels(g, meta), "baseline")
    return Trial(trial_id, values, labels, meta)


def gp_manifest(n_trials: int, n_points: int, seed: int, n_channels: int = 1,
                config_hash: str = "", extra: dict | None = None) -> DatasetManifest:
    return DatasetManifest(
        n_trials=n_trials,
        parameter_names=[f"y{c}" for c in range(n_channels)],
        class_names=list(GP_CLASS_NAMES),
        generator="gp",
        seed=seed,
        n_timesteps=n_points,
        dt=1.0 / (n_points - 1),
        config_hash=config_hash,
        extra=dict(extra or {}),
    )


def generate_gp_trials(n_nominal: int, n_anomalous: int, anomaly: KernelSpec, base_seed: int = 0,
                       n_points: int = 1000, n_channels: int = 1, first_id: int = 0) -> list[Trial]:
    """Nominal trials first, then anomalous ones; trial seed = base_seed + trial_id."""
    grid = default_grid(n_points)
    nominal = KernelSpec("nominal", jitter=anomaly.jitter)
    trials = []
    for k in range(n_nominal + n_anomalous):
        tid = first_id + k
        spec = nominal if k < n_nominal else anomaly
        trials.append(make_gp_trial(spec, grid, base_seed + tid, tid, n_channels=n_channels))
    return trials

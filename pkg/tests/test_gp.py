from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdrelabel.gp import (
    IndefiniteKernelError,
    KernelSpec,
    cholesky_factor,
    default_grid,
    generate_gp_trials,
    gram_matrix,
    kernel_eval,
    make_gp_trial,
    nominal_kernel,
    sample_gp,
    window_weight,
)


def test_nominal_kernel_hand_values():
    # 0.3 + 0.4 tt' + 3 (tt')^2 + t t'^2 + t' t^2
    assert nominal_kernel(0.0, 0.0) == pytest.approx(0.3)
    assert nominal_kernel(1.0, 1.0) == pytest.approx(0.3 + 0.4 + 3 + 1 + 1)
    assert nominal_kernel(0.5, 0.2) == pytest.approx(0.3 + 0.04 + 3 * 0.01 + 0.5 * 0.04 + 0.2 * 0.25)


def test_window_weight_is_triangular():
    a, b = 0.2, 0.6
    assert window_weight(0.4, a, b) == pytest.approx(1.0)
    assert window_weight(0.3, a, b) == pytest.approx(0.5)
    assert window_weight(a, a, b) == 0.0 and window_weight(0.9, a, b) == 0.0


def test_anomalous_kernel_adds_periodic_term():
    spec = KernelSpec("anomalous", 0.2, 0.6, anomaly_amplitude=0.3)
    t, s = 0.4, 0.45
    want = nominal_kernel(t, s) + 0.3 * window_weight(t, 0.2, 0.6) * window_weight(s, 0.2, 0.6) * math.exp(
        -2 * math.sin(10 * math.pi * (t - s)) ** 2)
    assert kernel_eval(spec, t, s) == pytest.approx(want, rel=1e-12)
    # outside the window the anomalous kernel is the nominal one
    assert kernel_eval(spec, 0.9, 0.95) == pytest.approx(nominal_kernel(0.9, 0.95))


@settings(max_examples=20, deadline=None)
@given(st.integers(5, 80), st.floats(0.0, 0.4), st.floats(0.05, 0.5))
def test_gram_symmetric_and_psd(n, a, width):
    grid = default_grid(n)
    spec = KernelSpec("anomalous", a, min(a + width, 1.0))
    K = gram_matrix(spec, grid)
    assert np.array_equal(K, K.T)
    assert np.linalg.eigvalsh(K).min() > -1e-8 * np.abs(K).max()


def test_cholesky_escalates_jitter_on_the_rank_deficient_polynomial_kernel():
    L, jitter = cholesky_factor(KernelSpec(), default_grid(400))
    assert 1e-10 <= jitter <= 1e-6
    assert np.all(np.isfinite(L))


def test_indefinite_beyond_max_jitter_raises(monkeypatch):
    import mdrelabel.gp as gp

    # a kernel with a negative eigenvalue of -1e-3 cannot be rescued by jitter <= 1e-6
    monkeypatch.setattr(gp, "kernel_eval", lambda spec, t, s: np.where(t == s, 1.0, 0.0) - 1.001 * (t != s) * 0.5)
    with pytest.raises(IndefiniteKernelError):
        cholesky_factor(KernelSpec(jitter=3e-10), default_grid(3))


def test_same_seed_same_sample():
    g = default_grid(50)
    assert np.array_equal(sample_gp(KernelSpec(), g, 11), sample_gp(KernelSpec(), g, 11))
    assert not np.array_equal(sample_gp(KernelSpec(), g, 11), sample_gp(KernelSpec(), g, 12))


def test_window_outside_grid_rejected():
    with pytest.raises(ValueError):
        make_gp_trial(KernelSpec("anomalous", 0.5, 1.5), default_grid(20), 0)


def test_trials_label_the_window():
    trials = generate_gp_trials(2, 2, KernelSpec("anomalous", 0.3, 0.7), base_seed=5, n_points=101)
    assert [t.class_id for t in trials] == [0, 0, 1, 1]
    lab = trials[2].labels.classes
    g = default_grid(101)
    assert np.array_equal(lab.astype(bool), (g >= 0.3) & (g <= 0.7))


def test_sample_variance_matches_kernel_diagonal():
    # 5000 independent draws; the empirical variance at each of a few grid
    # points must sit within 5% of k(t, t)
    n = 21
    g = default_grid(n)
    spec = KernelSpec("anomalous", 0.3, 0.7)
    X = np.stack([sample_gp(spec, g, s) for s in range(5000)])
    var = X.var(axis=0)
    diag = np.diag(gram_matrix(spec, g))
    idx = [2, 10, 15, 20]
    assert np.all(np.abs(var[idx] / diag[idx] - 1) < 0.05)

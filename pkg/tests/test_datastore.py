from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdrelabel.datastore import (
    AnomalyMeta,
    DatasetError,
    DatasetManifest,
    DimensionMismatchError,
    FormatVersionError,
    LabelRangeError,
    LabelSet,
    Trial,
    interval_labels,
    read_dataset,
    read_labels,
    read_manifest,
    write_dataset,
    write_labels,
)


def test_round_trip_is_exact(tmp_path, toy_manifest, toy_trials):
    write_dataset(toy_manifest, toy_trials, tmp_path / "d")
    man, trials = read_dataset(tmp_path / "d")
    assert man == toy_manifest
    for a, b in zip(toy_trials, trials):
        assert a.trial_id == b.trial_id
        assert np.array_equal(a.values, b.values)  # bitwise, not approximately
        assert np.array_equal(a.labels.classes, b.labels.classes)
        assert a.anomaly == b.anomaly


def test_zero_trials_gives_manifest_only(tmp_path, toy_manifest):
    toy_manifest.n_trials = 0
    root = write_dataset(toy_manifest, [], tmp_path / "empty")
    assert sorted(p.name for p in root.iterdir()) == ["manifest.json"]
    man, trials = read_dataset(root)
    assert trials == [] and man.n_trials == 0


def test_label_out_of_range_rejected(tmp_path, toy_manifest, toy_trials):
    toy_trials[1].labels = LabelSet(np.full(11, 5))
    with pytest.raises(LabelRangeError):
        write_dataset(toy_manifest, toy_trials, tmp_path / "d")


def test_dimension_mismatch_rejected(tmp_path, toy_manifest, toy_trials):
    toy_trials[0] = Trial(0, np.zeros((11, 3)), LabelSet(np.zeros(11)))
    with pytest.raises(DimensionMismatchError):
        write_dataset(toy_manifest, toy_trials, tmp_path / "d")


def test_newer_format_version_rejected(tmp_path, toy_manifest, toy_trials):
    root = write_dataset(toy_manifest, toy_trials, tmp_path / "d")
    d = json.loads((root / "manifest.json").read_text())
    d["format_version"] = 99
    (root / "manifest.json").write_text(json.dumps(d))
    with pytest.raises(FormatVersionError):
        read_manifest(root)


def test_nominal_must_be_class_zero():
    with pytest.raises(DatasetError):
        DatasetManifest(1, ["a"], ["leak", "nominal"], "gp", 0).validate()


def test_sibling_labels_never_touch_baseline(tmp_path, toy_manifest, toy_trials):
    root = write_dataset(toy_manifest, toy_trials, tmp_path / "d")
    before = (root / "trials" / "trial_1.csv").read_bytes()
    rel = {t.trial_id: LabelSet(np.full(11, t.class_id), "relabeled") for t in toy_trials}
    write_labels(root, "relabeled", rel)
    assert (root / "trials" / "trial_1.csv").read_bytes() == before
    back = read_labels(root, "relabeled")
    assert all(np.array_equal(back[k].classes, rel[k].classes) for k in rel)
    with pytest.raises(DatasetError):
        write_labels(root, "baseline", rel)
    with pytest.raises(DatasetError):
        read_labels(root, "corrected")


def test_rewrite_is_byte_identical(tmp_path, toy_manifest, toy_trials):
    a = write_dataset(toy_manifest, toy_trials, tmp_path / "a")
    b = write_dataset(toy_manifest, toy_trials, tmp_path / "b")
    for f in sorted(a.rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (b / f.relative_to(a)).read_bytes()


def test_interval_labels_inclusive():
    t = np.arange(10) * 0.5
    lab = interval_labels(t, AnomalyMeta(3, "c", "fail_open", 1.0, 2.0))
    assert lab.tolist() == [0, 0, 3, 3, 3, 0, 0, 0, 0, 0]
    assert interval_labels(t, None).sum() == 0


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=2, max_size=30))
def test_any_finite_double_round_trips(tmp_path_factory, xs):
    root = tmp_path_factory.mktemp("rt")
    n = len(xs)
    man = DatasetManifest(1, ["v"], ["nominal"], "gp", 0, n_timesteps=n, dt=0.1)
    trial = Trial(0, np.array(xs)[:, None], LabelSet(np.zeros(n)))
    write_dataset(man, [trial], root)
    _, back = read_dataset(root)
    assert np.array_equal(back[0].values[:, 0], np.array(xs))

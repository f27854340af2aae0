import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gcr.correspondence import DepthMap, DescriptorField
from gcr.geometry import CameraIntrinsics, Pose, rotation_about_axis
from gcr.metrics import (MetricError, auc_at, auc_trapezoid_reference, descriptor_error_map, pose_error,
                         read_pgm16)
from gcr.synth import DifficultyConfig, make_scene, perturb_pose, render_depth, render_descriptors

errors = st.lists(st.floats(0, 50), min_size=1, max_size=60)


def test_auc_examples():
    assert auc_at([0, 0, 0], 5) == 100.0
    assert auc_at([5, 7, 100], 5) == 0.0
    assert auc_at([0, 5], 5) == 50.0
    with pytest.raises(MetricError):
        auc_at([], 5)
    with pytest.raises(MetricError):
        auc_at([1.0], 0)


@given(errors, st.floats(0.1, 30))
def test_auc_matches_trapezoid(e, th):
    assert auc_at(e, th) == pytest.approx(auc_trapezoid_reference(e, th), abs=1e-9)


@given(errors, st.floats(0.1, 30))
def test_auc_bounds_and_scale(e, th):
    a = auc_at(e, th)
    assert 0 <= a <= 100
    assert auc_at(np.array(e) * 2, th * 2) == pytest.approx(a, abs=1e-9)


@given(errors, st.integers(0, 59), st.floats(0, 10))
def test_auc_monotone_in_each_error(e, i, bump):
    e = np.array(e)
    i %= len(e)
    worse = e.copy()
    worse[i] += bump
    assert auc_at(worse, 5.0) <= auc_at(e, 5.0) + 1e-12


def test_pose_error_combined_is_max():
    p = Pose.identity()
    q = Pose(np.eye(3), [1.0, 0, 0])
    s = pose_error(q, Pose(np.eye(3), [0, 1.0, 0]))
    assert s.combined == pytest.approx(90.0) and s.rotation_deg == pytest.approx(0.0, abs=1e-6)
    assert pose_error(p, p).combined == pytest.approx(0.0, abs=1e-6)


def _scene(seed, cfg=DifficultyConfig()):
    s = make_scene(seed, cfg)
    return s, render_descriptors(s, 1), render_descriptors(s, 2), render_depth(s, 1)


def test_error_map_gt_small():
    s, f1, f2, d = _scene(0)
    m = descriptor_error_map(f1, f2, d, s.k1, s.k2, s.gt_pose)
    assert m.mean < 5e-3
    assert np.all((m.values[m.valid] >= 0) & (m.values[m.valid] <= 1))
    assert m.mean == pytest.approx(m.values[m.valid].sum() / m.valid_count, abs=1e-12)


def test_error_map_identity_fields_zero():
    k = CameraIntrinsics(20.0, 20.0, 8.0, 6.0, 16, 12)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(12, 16, 4))
    f = DescriptorField(x / np.linalg.norm(x, axis=-1, keepdims=True), np.ones((12, 16)))
    m = descriptor_error_map(f, f, DepthMap.from_array(np.full((12, 16), 3.0)), k, k, Pose.identity())
    assert np.allclose(m.values[m.valid], 0.0, atol=1e-12) and m.valid_count > 0


def test_error_map_perturbed_worse():
    s, f1, f2, d = _scene(2)
    gt = descriptor_error_map(f1, f2, d, s.k1, s.k2, s.gt_pose).mean
    bad = descriptor_error_map(f1, f2, d, s.k1, s.k2, perturb_pose(s.gt_pose, 5.0, np.random.default_rng(0))).mean
    assert bad > gt


def test_error_map_monotone_median():
    rng = np.random.default_rng(0)
    cfg = DifficultyConfig(min_overlap=0.5)  # enough shared view for a 10 degree swing
    scenes = [_scene(i, cfg) for i in range(50)]
    axes = rng.normal(size=(50, 3))
    med = []
    for deg in (0.0, 2.0, 5.0, 10.0):
        vals = []
        for (s, f1, f2, d), ax in zip(scenes, axes):
            p = Pose(rotation_about_axis(ax, deg) @ s.gt_pose.rotation, s.gt_pose.translation)
            vals.append(descriptor_error_map(f1, f2, d, s.k1, s.k2, p).mean)
        med.append(np.median(vals))
    assert all(a <= b for a, b in zip(med, med[1:]))


def test_error_map_export(tmp_path):
    s, f1, f2, d = _scene(1)
    m = descriptor_error_map(f1, f2, d, s.k1, s.k2, s.gt_pose)
    m.write_pgm(tmp_path / "e.pgm")
    img = read_pgm16(tmp_path / "e.pgm")
    assert img.shape == (m.height, m.width)
    expect = np.rint(np.clip(np.where(m.valid, m.values, 0), 0, 1) * 65535)
    assert np.array_equal(img, expect)
    assert m.sidecar()["valid_count"] == m.valid_count
    counts, edges = m.histogram()
    assert counts.sum() == m.valid_count and len(edges) == 21


def test_error_map_no_valid_pixels():
    s, f1, f2, d = _scene(3)
    away = Pose(np.diag([1.0, -1.0, -1.0]), np.zeros(3))
    with pytest.raises(MetricError):
        descriptor_error_map(f1, f2, d, s.k1, s.k2, away)

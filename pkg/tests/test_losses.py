import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gcr.correspondence import DescriptorField, form_correspondences
from gcr.geometry import Pose, random_rotation, rotation_about_axis
from gcr.losses import (LossError, LossWeights, bilinear_sample, consistency_loss, descriptor_loss,
                        descriptor_loss_batch, descriptor_loss_batch_reference, pose_loss, total_loss)
from gcr.synth import make_scene, perturb_pose, render_depth, render_descriptors

seeds = st.integers(0, 2**32 - 1)


def _pose(rng):
    return Pose(random_rotation(rng), rng.normal(size=3))


def _field(seed, h=6, w=7, d=5):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(h, w, d))
    return DescriptorField(x / np.linalg.norm(x, axis=-1, keepdims=True), rng.uniform(0.2, 1, size=(h, w)))


# consistency / pose

def test_consistency_examples():
    p = _pose(np.random.default_rng(0))
    assert consistency_loss(p, p) == pytest.approx(0.0, abs=1e-6)
    q = Pose(rotation_about_axis([0, 0, 1], 10.0) @ p.rotation, 2.5 * p.translation)
    assert consistency_loss(q, p) == pytest.approx(10.0, abs=1e-9)


@given(seeds)
def test_consistency_nonnegative_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = _pose(rng), _pose(rng)
    assert consistency_loss(a, b) >= 0
    assert consistency_loss(a, b) == pytest.approx(consistency_loss(b, a), abs=1e-9)


def test_pose_loss_examples():
    p = _pose(np.random.default_rng(1))
    assert pose_loss(p, p) == pytest.approx(0.0, abs=1e-6)
    t = np.array([0.0, 0.6, 0.8])
    assert pose_loss(Pose(np.eye(3), t), Pose(np.eye(3), 2 * t)) == pytest.approx(1.0)


@given(seeds)
def test_pose_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    assert pose_loss(_pose(rng), _pose(rng)) >= 0


def test_total_loss_examples():
    assert total_loss(1, 2, 3).total == pytest.approx(1.3)
    r = total_loss(1, 2, 3, gated=False)
    assert r.total == pytest.approx(0.8 + 0.3) and r.consistency_loss == 0 and not r.consistency_applied
    assert total_loss(1, 2, 3, LossWeights(0, 0, 0)).total == 0
    assert total_loss(1, 2, 3, LossWeights(1, 1, 1)).csv_row() == "1.0,2.0,3.0,6.0,1"
    with pytest.raises(LossError):
        LossWeights(-0.1, 0.1, 0.1)


# bilinear sampling

def test_bilinear_integer_pixels_exact():
    f = _field(0)
    for u, v in [(0, 0), (3, 2), (6, 5)]:
        d, c = bilinear_sample(f, [u, v])
        assert np.allclose(d, f.descriptors[v, u], atol=1e-15) and c == pytest.approx(f.confidence[v, u])


def test_bilinear_between_identical_neighbours():
    f = _field(1)
    D, C = f.descriptors.copy(), f.confidence.copy()
    D[2, 3] = D[2, 4]
    C[2, 3] = C[2, 4]
    d, c = bilinear_sample(DescriptorField(D, C), [3.5, 2])
    assert np.allclose(d, D[2, 4]) and c == pytest.approx(C[2, 4])


def test_bilinear_continuity():
    f = _field(2)
    d0, _ = bilinear_sample(f, [2.3, 3.7])
    gaps = [np.linalg.norm(bilinear_sample(f, [2.3 + h, 3.7])[0] - d0) for h in (1e-2, 1e-4, 1e-6)]
    assert gaps[0] > gaps[1] > gaps[2] and gaps[2] < 1e-5
    assert gaps[1] / 1e-4 < 10  # slope bounded


def test_bilinear_outside_support():
    f = _field(3)
    for px in ([-0.01, 1], [6.01, 1], [1, 5.5]):
        with pytest.raises(LossError, match="outside field"):
            bilinear_sample(f, px)


# descriptor loss

def _setup(seed):
    s = make_scene(seed)
    cs = form_correspondences(render_depth(s, 1), s.k1, s.k2, s.gt_pose)
    return s, cs, render_descriptors(s, 1), render_descriptors(s, 2)


def test_descriptor_loss_gt_near_minus_one():
    for seed in range(10):
        s, cs, f1, f2 = _setup(seed)
        assert descriptor_loss(f1, f2, cs, s.gt_pose, s.k2) == pytest.approx(-1.0, abs=5e-3)


def test_descriptor_loss_perturbation_increases():
    s, cs, f1, f2 = _setup(4)
    gt = descriptor_loss(f1, f2, cs, s.gt_pose, s.k2)
    bad = descriptor_loss(f1, f2, cs, perturb_pose(s.gt_pose, 5.0, np.random.default_rng(0)), s.k2)
    assert bad > gt


@given(seeds)
def test_descriptor_loss_lower_bound(seed):
    rng = np.random.default_rng(seed)
    s, cs, f1, f2 = _setup(int(rng.integers(0, 30)))
    p = perturb_pose(s.gt_pose, float(rng.uniform(0, 10)), rng)
    try:
        assert descriptor_loss(f1, f2, cs, p, s.k2) >= -1 - 1e-12
    except LossError:
        pass


def test_descriptor_loss_no_support():
    s, cs, f1, f2 = _setup(0)
    away = Pose(rotation_about_axis([1, 0, 0], 180.0), np.zeros(3))
    with pytest.raises(LossError, match="no descriptor support"):
        descriptor_loss(f1, f2, cs, away, s.k2)


def test_equal_confidences_give_plain_mean():
    s, cs, f1, f2 = _setup(5)
    one = DescriptorField(f1.descriptors, np.ones_like(f1.confidence))
    two = DescriptorField(f2.descriptors, np.ones_like(f2.confidence))
    p = perturb_pose(s.gt_pose, 2.0, np.random.default_rng(1))
    rows = cs.valid_indices
    px1 = cs.pixel1[rows].astype(int)
    src = f1.descriptors[px1[:, 1], px1[:, 0]]
    y = cs.p3d[rows] @ p.rotation.T + p.translation
    px = np.c_[s.k2.fx * y[:, 0] / y[:, 2] + s.k2.cx, s.k2.fy * y[:, 1] / y[:, 2] + s.k2.cy]
    ok = (px[:, 0] >= 0) & (px[:, 0] <= s.k2.width - 1) & (px[:, 1] >= 0) & (px[:, 1] <= s.k2.height - 1)
    sims = [src[i] @ bilinear_sample(two, px[i])[0] for i in np.flatnonzero(ok)]
    assert descriptor_loss(one, two, cs, p, s.k2) == pytest.approx(-np.mean(sims), abs=1e-12)


@given(seeds)
def test_compiled_matches_reference(seed):
    rng = np.random.default_rng(seed)
    s, cs, f1, f2 = _setup(int(rng.integers(0, 20)))
    rows = cs.valid_indices
    px1 = cs.pixel1[rows].astype(int)
    src, conf = f1.descriptors[px1[:, 1], px1[:, 0]], f1.confidence[px1[:, 1], px1[:, 0]]
    poses = [perturb_pose(s.gt_pose, float(a), rng) for a in rng.uniform(0, 30, size=4)]
    R = np.stack([p.rotation for p in poses])
    t = np.stack([p.translation for p in poses])
    a, na = descriptor_loss_batch(R, t, src, conf, cs.p3d[rows], f2, s.k2)
    b, nb = descriptor_loss_batch_reference(R, t, src, conf, cs.p3d[rows], f2, s.k2)
    assert np.array_equal(na, nb)
    assert np.allclose(a, b, atol=1e-12, equal_nan=True)

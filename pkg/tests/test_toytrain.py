import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gcr.correspondence import DepthMap, sample_grid
from gcr.geometry import is_rotation
from gcr.metrics import pose_error
from gcr.toytrain import (FEATURE_DIM, HISTORY_HEADER, N_PARAMS, ToyRegressor, TrainConfig, TrainingError,
                          evaluate, fd_gradient, forward_batch, history_csv, make_toy_scenes, noisy_label,
                          prepare_pair, toy_forward, train)
from gcr.synth import render_depth


@pytest.fixture(scope="module")
def pairs():
    return [prepare_pair(s) for s in make_toy_scenes(0, 6)]


def test_zero_params_identity():
    p = toy_forward(ToyRegressor.zeros(), np.random.default_rng(0).normal(size=FEATURE_DIM))
    assert np.allclose(p.rotation, np.eye(3)) and np.allclose(p.translation, 0)


def test_forward_deterministic_and_valid():
    rng = np.random.default_rng(1)
    params = rng.normal(size=(1000, N_PARAMS))
    feats = rng.normal(size=(3, FEATURE_DIM))
    R, t = forward_batch(params, feats, 2.0)
    assert all(is_rotation(r) for r in R.reshape(-1, 3, 3))
    assert np.all(np.linalg.norm(t, axis=-1) <= 2.0 + 1e-12)
    R2, t2 = forward_batch(params, feats, 2.0)
    assert np.array_equal(R, R2) and np.array_equal(t, t2)


def test_fd_quadratic_and_constant():
    g = fd_gradient(lambda x: float(x @ x), [1.0, 2.0], 1e-4)
    assert np.allclose(g, [2, 4], atol=1e-7)
    assert np.array_equal(fd_gradient(lambda x: 3.0, [1.0, 2.0, 3.0], 1e-3), np.zeros(3))


def test_fd_vectorised_matches_loop():
    f = lambda x: np.sin(x).sum() + x[0] * x[1] ** 2
    x = np.array([0.3, -1.2, 0.5])
    a = fd_gradient(f, x, 1e-5)
    b = fd_gradient(lambda X: np.array([f(r) for r in X]), x, 1e-5, vectorized=True)
    assert np.array_equal(a, b)


def test_fd_order_of_accuracy():
    f = lambda x: float(np.exp(x[0]) * np.cos(x[1]))
    x = np.array([0.4, 0.7])
    exact = np.array([np.exp(0.4) * np.cos(0.7), -np.exp(0.4) * np.sin(0.7)])
    for h in (1e-2, 1e-3):
        central = fd_gradient(f, x, h)
        forward = np.array([(f(x + h * e) - f(x)) / h for e in np.eye(2)])
        assert np.max(np.abs(central - exact)) < 5 * h**2
        assert np.max(np.abs(forward - central)) < 5 * h


def test_fd_errors():
    with pytest.raises(ValueError):
        fd_gradient(lambda x: 0.0, [1.0], 0.0)
    with pytest.raises(TrainingError):
        fd_gradient(lambda x: np.nan, [1.0], 1e-3)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(fd_step=0)
    with pytest.raises(ValueError, match="^mode"):
        TrainConfig.from_dict({"mode": "bogus"})
    with pytest.raises(ValueError, match="^ransac"):
        TrainConfig.from_dict({"ransac": {"iterations": 0}})
    cfg = TrainConfig.from_dict({"steps": 5, "loss_weights": {"lambda_pose": 1.0}})
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_modes_select_terms():
    lw = TrainConfig(mode="pose_only").active_weights()
    assert (lw.lambda_consistency, lw.lambda_desc) == (0, 0)
    lw = TrainConfig(mode="pose+desc").active_weights()
    assert lw.lambda_consistency == 0 and lw.lambda_desc == 0.1
    assert TrainConfig(mode="full").active_weights().lambda_consistency == 0.1


def test_zero_learning_rate_is_flat(pairs):
    reg, hist = train(None, TrainConfig(steps=3, learning_rate=0.0, mode="pose+desc"), pairs=pairs)
    assert np.array_equal(reg.params, np.zeros(N_PARAMS))
    assert len({h.total for h in hist}) == 1
    # in full mode the RANSAC target is redrawn each step, the other parts stay put
    _, hist = train(None, TrainConfig(steps=3, learning_rate=0.0), pairs=pairs)
    assert len({(h.pose_loss, h.descriptor_loss) for h in hist}) == 1


def test_history_reproducible(pairs):
    cfg = TrainConfig(steps=4, seed=3)
    a = history_csv(train(None, cfg, pairs=pairs)[1])
    b = history_csv(train(None, cfg, pairs=pairs)[1])
    assert a == b
    assert a.splitlines()[0].split(",") == HISTORY_HEADER and len(a.splitlines()) == 5


def test_full_mode_training_improves():
    pairs = [prepare_pair(s) for s in make_toy_scenes(1, 20)]
    reg0 = ToyRegressor.zeros()
    reg, hist = train(None, TrainConfig(steps=300, seed=1), pairs=pairs)
    before = np.median([pose_error(toy_forward(reg0, p.features), p.scene.gt_pose).combined for p in pairs])
    after = np.median(evaluate(reg, pairs)["errors"])
    assert after < before
    assert hist[-1].pose_loss < hist[0].pose_loss


def test_divergence_aborts(pairs):
    with pytest.raises(TrainingError, match="diverged"):
        train(None, TrainConfig(steps=50, learning_rate=1e9, grad_clip=None, schedule="constant",
                                s_max=1e7), pairs=pairs)


def _gated_pair(scene, n_valid):
    """Pair whose depth map keeps exactly ``n_valid`` grid cells."""
    d = render_depth(scene, 1).values.copy()
    keep = np.zeros(d.shape, bool)
    g = sample_grid(scene.k1.width, scene.k1.height, 8).astype(int)[:n_valid]
    keep[g[:, 1], g[:, 0]] = True
    return prepare_pair(scene, depth1=DepthMap.from_array(np.where(keep, d, np.nan)))


def test_gate_zeroes_consistency_at_fifty():
    scene = make_toy_scenes(2, 1)[0]
    cfg = TrainConfig(steps=2, learning_rate=0.0, mode="full")
    for n, gated in ((50, False), (51, True)):
        _, hist = train(None, cfg, pairs=[_gated_pair(scene, n)])
        for rec in hist:
            r = rec.scene_reports[0]
            assert r.consistency_applied is gated
            assert (r.consistency_loss > 0) is gated


def test_labels():
    s = make_toy_scenes(0, 1)[0]
    assert noisy_label(s, 0.0) is s.gt_pose
    p = noisy_label(s, 3.0)
    assert pose_error(p, s.gt_pose).rotation_deg == pytest.approx(3.0, abs=1e-6)
    assert np.array_equal(noisy_label(s, 3.0).rotation, p.rotation)


@given(st.integers(0, 2**31))
def test_regressor_serialisation(seed):
    rng = np.random.default_rng(seed)
    r = ToyRegressor(rng.normal(size=N_PARAMS), rng.uniform(0.1, 2, FEATURE_DIM), 1.5)
    q = ToyRegressor.from_dict(r.to_dict())
    assert np.array_equal(q.params, r.params) and np.array_equal(q.feature_scale, r.feature_scale)

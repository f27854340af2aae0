"""Desk-scale pose regressor trained with the consistency-regularised objective.

The regressor is linear in a 10-dim per-pair feature vector (the homography
relating matched grid pixels, minus identity, plus a bias term):

* rotation: ``svd_orthogonalize(I + skew(W_rot @ phi))``
* translation: ``v = W_trans @ phi``, ``t = s_max * tanh(|v|) * v / |v|``

so all-zero parameters predict the identity pose.  Training is plain
gradient descent with central finite-difference gradients.  Each step
re-forms the correspondences from the current prediction and re-solves
P_solver with weighted RANSAC; within a step P_solver, the correspondence
set and the gate decision are constants.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .correspondence import (DEFAULT_STRIDE, CorrespondenceSet, DepthMap, DescriptorField,
                             build_embeddings, form_correspondences, gate_sufficient)
from .fusion import FusionConfig, FusionParams, fusion_forward, init_params
from .geometry import GeometryError, Pose, skew, svd_orthogonalize
from .losses import (LossReport, LossWeights, consistency_loss_batch, descriptor_loss_tabled, descriptor_tables,
                     pose_loss_batch, total_loss)
from .metrics import AUC_THRESHOLDS, auc_at, pose_error
from .synth import (DifficultyConfig, NoiseSpec, Scene, _rng, corrupt_correspondences, gt_observations,
                    make_scene, perturb_pose, render_depth, render_descriptors)
from .wransac import RansacConfig, RansacError, run_weighted_ransac_many

log = logging.getLogger(__name__)

FEATURE_DIM = 10
N_PARAMS = 6 * FEATURE_DIM
MODES = ("pose_only", "pose+desc", "full")
DIVERGENCE_LIMIT = 1e6
_LABEL_NOISE = 404

# Scenes the toy regressor is sized for: small motions, near fronto-parallel
# planes, 80x80 images (100 grid cells at stride 8).
TOY_DIFFICULTY = DifficultyConfig(
    width=(80, 80), height=(80, 80), focal=(70.0, 90.0), focal_jitter=0.0,
    max_rotation_deg=10.0, baseline=(0.2, 0.4), plane_distance=(2.5, 3.5),
    max_tilt_deg=15.0, min_overlap=0.9,
    noise=NoiseSpec(pixel_sigma=0.5, outlier_fraction=0.2),
)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    learning_rate: float = 0.03
    fd_step: float = 1e-4
    grad_clip: float | None = 1.0
    schedule: str = "cosine"
    label_noise_deg: float = 0.0
    seed: int = 0
    mode: str = "full"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    s_max: float = 2.0
    stride: int = DEFAULT_STRIDE
    # 20 draws: P(no clean 6-sample at 20% outliers) ~ 0.2%
    ransac: RansacConfig = field(default_factory=lambda: RansacConfig(iterations=20))
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.fd_step > 0:
            raise ValueError("fd_step must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.label_noise_deg < 0:
            raise ValueError("label_noise_deg must be non-negative")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError("schedule must be 'constant' or 'cosine'")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Build from parsed JSON; nested ``loss_weights``, ``ransac`` and ``fusion`` objects."""
        nested = {"loss_weights": lambda v: LossWeights(**v), "ransac": RansacConfig.from_dict,
                  "fusion": lambda v: FusionConfig(**v)}
        kw = {}
        for key, v in d.items():
            if key not in cls.__dataclass_fields__:
                raise ValueError(f"{key}: unknown field")
            try:
                kw[key] = nested[key](v) if key in nested else v
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{key}: {exc}") from exc
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ValueError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def rate(self, step: int) -> float:
        if self.schedule == "cosine":
            return self.learning_rate * 0.5 * (1.0 + np.cos(np.pi * step / self.steps))
        return self.learning_rate

    def active_weights(self) -> LossWeights:
        lw = self.loss_weights
        if self.mode == "pose_only":
            return LossWeights(lw.lambda_pose, 0.0, 0.0)
        if self.mode == "pose+desc":
            return LossWeights(lw.lambda_pose, 0.0, lw.lambda_desc)
        return lw


@dataclass(eq=False)
class ToyRegressor:
    params: np.ndarray
    feature_scale: np.ndarray = field(default_factory=lambda: np.ones(FEATURE_DIM))
    s_max: float = 2.0

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float).reshape(N_PARAMS)
        self.feature_scale = np.asarray(self.feature_scale, dtype=float).reshape(FEATURE_DIM)

    @classmethod
    def zeros(cls, feature_scale=None, s_max: float = 2.0) -> "ToyRegressor":
        scale = np.ones(FEATURE_DIM) if feature_scale is None else feature_scale
        return cls(np.zeros(N_PARAMS), scale, s_max)

    def to_dict(self) -> dict:
        return {"params": self.params.tolist(), "feature_scale": self.feature_scale.tolist(),
                "s_max": self.s_max}

    @classmethod
    def from_dict(cls, d: dict) -> "ToyRegressor":
        return cls(np.array(d["params"]), np.array(d["feature_scale"]), float(d["s_max"]))


def pair_features(scene: Scene, stride: int = DEFAULT_STRIDE, depth1: DepthMap | None = None) -> np.ndarray:
    """Homography fitted to matched grid pixels, normalised, minus identity; plus a bias 1.

    Matches are the ground-truth camera-2 locations of the grid pixels.  The
    homography works in normalised camera coordinates and is scaled so its
    middle singular value is 1, which makes ``H - I`` vanish at identity.
    """
    depth1 = render_depth(scene, 1) if depth1 is None else depth1
    cs = form_correspondences(depth1, scene.k1, scene.k2, scene.gt_pose, stride)
    ok = cs.valid
    if ok.sum() < 4:
        raise TrainingError("too few matched grid pixels for features")
    k1, k2 = scene.k1, scene.k2
    a = np.c_[(cs.pixel1[ok, 0] - k1.cx) / k1.fx, (cs.pixel1[ok, 1] - k1.cy) / k1.fy, np.ones(ok.sum())]
    b = np.c_[(cs.pixel2[ok, 0] - k2.cx) / k2.fx, (cs.pixel2[ok, 1] - k2.cy) / k2.fy, np.ones(ok.sum())]
    z = np.zeros_like(a)
    rows_u = np.concatenate([z, -a, b[:, 1:2] * a], axis=1)
    rows_v = np.concatenate([a, z, -b[:, 0:1] * a], axis=1)
    _, _, vt = np.linalg.svd(np.concatenate([rows_u, rows_v]))
    H = vt[-1].reshape(3, 3)
    H = H / np.linalg.svd(H, compute_uv=False)[1]
    if np.linalg.det(H) < 0:
        H = -H
    return np.r_[(H - np.eye(3)).ravel(), 1.0]


def forward_batch(params, features, s_max: float):
    """Poses for every (parameter vector, feature vector) pair.

    params: (M, N_PARAMS), features: (S, FEATURE_DIM) -> R (M, S, 3, 3), t (M, S, 3).
    """
    params = np.atleast_2d(params)
    w_rot = params[:, : 3 * FEATURE_DIM].reshape(-1, 3, FEATURE_DIM)
    w_tr = params[:, 3 * FEATURE_DIM:].reshape(-1, 3, FEATURE_DIM)
    omega = np.einsum("mij,sj->msi", w_rot, features)
    R = svd_orthogonalize(np.eye(3) + skew(omega))
    v = np.einsum("mij,sj->msi", w_tr, features)
    nv = np.linalg.norm(v, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(nv > 1e-12, s_max * np.tanh(nv) * v / nv, 0.0)
    return R, t


def toy_forward(reg: ToyRegressor, scene_features) -> Pose:
    phi = np.asarray(scene_features, dtype=float).reshape(1, FEATURE_DIM) / reg.feature_scale
    R, t = forward_batch(reg.params[None], phi, reg.s_max)
    return Pose(R[0, 0], t[0, 0])


def fd_gradient(objective, params, h: float, vectorized: bool = False) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate.

    With ``vectorized=True`` the objective receives all 2P probe points as
    one (2P, P) array (the +h rows first) and returns 2P values.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.asarray(params, dtype=float)
    P = x.size
    probes = np.concatenate([x + h * np.eye(P), x - h * np.eye(P)])
    if vectorized:
        vals = np.asarray(objective(probes), dtype=float)
    else:
        vals = np.array([objective(p) for p in probes], dtype=float)
    if not np.all(np.isfinite(vals)):
        raise TrainingError("objective is not finite")
    return (vals[:P] - vals[P:]) / (2 * h)


@dataclass(eq=False)
class PairData:
    """Everything the trainer needs about one scene, computed once."""

    scene: Scene
    depth1: DepthMap
    f1: DescriptorField
    f2: DescriptorField
    features: np.ndarray
    observed: np.ndarray      # camera-2 observations, aligned with correspondence rows
    inlier_mask: np.ndarray
    embeddings: np.ndarray    # aligned with correspondence rows
    src_desc: np.ndarray
    src_conf: np.ndarray
    _tables: tuple | None = None

    @property
    def tables(self):
        """Descriptor dot-product tables, built on first use."""
        if self._tables is None:
            self._tables = descriptor_tables(self.src_desc, self.f2)
        return self._tables


def prepare_pair(scene: Scene, stride: int = DEFAULT_STRIDE, depth1: DepthMap | None = None,
                 f1: DescriptorField | None = None, f2: DescriptorField | None = None) -> PairData:
    """Precompute per-scene training inputs; rendered from the scene unless given."""
    depth1 = render_depth(scene, 1) if depth1 is None else depth1
    f1 = render_descriptors(scene, 1) if f1 is None else f1
    f2 = render_descriptors(scene, 2) if f2 is None else f2
    # rows are the grid pixels with valid depth whatever pose forms the set
    cs = form_correspondences(depth1, scene.k1, scene.k2, scene.gt_pose, stride)
    obs, mask = corrupt_correspondences(cs, gt_observations(scene, cs), scene.noise.outlier_fraction,
                                        scene.noise.pixel_sigma, _rng(scene.seed, 303), scene.k2)
    px = np.rint(cs.pixel1).astype(int)
    return PairData(scene, depth1, f1, f2, pair_features(scene, stride, depth1), obs, mask,
                    build_embeddings(f1, f2, stride, grid_index=cs.grid_index),
                    f1.descriptors[px[:, 1], px[:, 0]], f1.confidence[px[:, 1], px[:, 0]])


@dataclass(frozen=True)
class StepRecord:
    step: int
    mode: str
    pose_loss: float
    consistency_loss: float
    descriptor_loss: float
    total: float
    gated_fraction: float
    scene_reports: tuple[LossReport, ...]


HISTORY_HEADER = ["step", "mode", "pose_loss", "consistency_loss", "descriptor_loss", "total", "gated_fraction"]


def history_csv(history: list[StepRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_HEADER)
    for r in history:
        w.writerow([r.step, r.mode, repr(r.pose_loss), repr(r.consistency_loss), repr(r.descriptor_loss),
                    repr(r.total), repr(r.gated_fraction)])
    return buf.getvalue()


def step_seed(seed: int, step: int, scene_index: int) -> int:
    return int(np.random.SeedSequence([seed, step, scene_index]).generate_state(1, np.uint64)[0])


@dataclass(eq=False)
class _StepTargets:
    cs: CorrespondenceSet
    gated: bool
    solver: Pose | None
    rows: np.ndarray


def _step_targets(pairs, poses, cfg: TrainConfig, fusion: FusionParams, step: int,
                  need_solver: bool, weight_cache: dict) -> list[_StepTargets]:
    """Correspondences, gate and P_solver for every scene at the current prediction."""
    targets, problems, slots = [], [], []
    for i, (pair, p_reg) in enumerate(zip(pairs, poses)):
        s = pair.scene
        cs = form_correspondences(pair.depth1, s.k1, s.k2, p_reg, cfg.stride)
        rows = cs.valid_indices
        tg = _StepTargets(cs, gate_sufficient(cs), None, rows)
        targets.append(tg)
        if tg.gated and need_solver:
            # fusion weights depend only on which rows are valid
            key = (i, rows.tobytes())
            if key not in weight_cache:
                weight_cache[key] = fusion_forward(fusion, pair.embeddings[rows])
            rcfg = replace(cfg.ransac, seed=step_seed(cfg.seed, step, i))
            problems.append((cs, pair.observed, weight_cache[key], p_reg, s.k2, rcfg))
            slots.append(i)
    for i, res in zip(slots, run_weighted_ransac_many(problems)):
        if isinstance(res, RansacError):
            log.debug("scene %d step %d: %s", i, step, res)
            targets[i].gated = False
        else:
            targets[i].solver = res.pose
    return targets


def noisy_label(scene: Scene, degrees: float) -> Pose:
    """Ground-truth pose with annotation error of ``degrees`` (see ``perturb_pose``)."""
    if degrees == 0:
        return scene.gt_pose
    return perturb_pose(scene.gt_pose, degrees, _rng(scene.seed, _LABEL_NOISE))


def _scene_terms(R, t, pair: PairData, tg: _StepTargets, need_desc: bool, gt: Pose):
    """Loss parts for a stack of poses R (M,3,3), t (M,3) on one scene."""
    pose = pose_loss_batch(R, t, gt.rotation, gt.translation)
    if tg.gated and tg.solver is not None:
        cons = consistency_loss_batch(R, t, tg.solver.rotation, tg.solver.translation)
    else:
        cons = np.zeros(len(R))
    if need_desc and tg.rows.size:
        desc, _ = descriptor_loss_tabled(R, t, tg.cs.p3d, tg.rows, pair.src_conf, pair.tables,
                                         pair.f2, pair.scene.k2)
        desc = np.nan_to_num(desc, nan=0.0)
    else:
        desc = np.zeros(len(R))
    return np.atleast_1d(pose), np.atleast_1d(cons), desc


def train(scenes, cfg: TrainConfig = TrainConfig(), pairs: list[PairData] | None = None,
          reg: ToyRegressor | None = None) -> tuple[ToyRegressor, list[StepRecord]]:
    """Gradient descent on the total loss; returns the regressor and per-step history."""
    if pairs is None:
        pairs = [prepare_pair(s, cfg.stride) for s in scenes]
    if not pairs:
        raise TrainingError("need at least one scene")
    feats = np.array([p.features for p in pairs])
    if reg is None:
        scale = np.maximum(np.abs(feats).max(axis=0), 1e-6)
        reg = ToyRegressor.zeros(scale, cfg.s_max)
    phi = feats / reg.feature_scale
    lw = cfg.active_weights()
    need_solver = lw.lambda_consistency > 0
    fusion = init_params(cfg.fusion, cfg.seed)
    theta = reg.params.copy()
    history = []
    weight_cache: dict = {}
    labels = [noisy_label(p.scene, cfg.label_noise_deg) for p in pairs]
    for step in range(cfg.steps):
        R0, t0 = forward_batch(theta[None], phi, reg.s_max)
        poses = [Pose(R0[0, i], t0[0, i]) for i in range(len(pairs))]
        targets = _step_targets(pairs, poses, cfg, fusion, step, need_solver, weight_cache)

        reports = []
        for i, pair in enumerate(pairs):
            # the descriptor part is always recorded; the objective only uses it when active
            pose, cons, desc = _scene_terms(R0[:, i], t0[:, i], pair, targets[i], True, labels[i])
            reports.append(total_loss(pose[0], cons[0], desc[0], lw, targets[i].gated))
        rec = StepRecord(step, cfg.mode,
                         float(np.mean([r.pose_loss for r in reports])),
                         float(np.mean([r.consistency_loss for r in reports])),
                         float(np.mean([r.descriptor_loss for r in reports])),
                         float(np.mean([r.total for r in reports])),
                         float(np.mean([t.gated for t in targets])),
                         tuple(reports))
        history.append(rec)
        if not np.isfinite(rec.total) or rec.total > DIVERGENCE_LIMIT:
            raise TrainingError(f"diverged at step {step}: total loss {rec.total!r}")

        def objective(thetas):
            R, t = forward_batch(thetas, phi, reg.s_max)
            acc = np.zeros(len(thetas))
            for i, pair in enumerate(pairs):
                pose, cons, desc = _scene_terms(R[:, i], t[:, i], pair, targets[i], lw.lambda_desc > 0, labels[i])
                acc += lw.lambda_pose * pose + lw.lambda_consistency * cons + lw.lambda_desc * desc
            return acc / len(pairs)

        if cfg.learning_rate > 0:
            g = fd_gradient(objective, theta, cfg.fd_step, vectorized=True)
            gn = np.linalg.norm(g)
            if cfg.grad_clip is not None and gn > cfg.grad_clip:
                g = g * (cfg.grad_clip / gn)
            theta = theta - cfg.rate(step) * g
    return ToyRegressor(theta, reg.feature_scale, reg.s_max), history


def evaluate(reg: ToyRegressor, pairs_or_scenes, thresholds=AUC_THRESHOLDS) -> dict:
    """Held-out errors (max of rotation and translation-direction angle) and AUCs."""
    errors = []
    for item in pairs_or_scenes:
        feats = item.features if isinstance(item, PairData) else pair_features(item)
        scene = item.scene if isinstance(item, PairData) else item
        errors.append(pose_error(toy_forward(reg, feats), scene.gt_pose).combined)
    errors = np.array(errors)
    return {"errors": errors, "auc": {float(th): auc_at(errors, th) for th in thresholds}}


def make_toy_scenes(seed: int, count: int, cfg: DifficultyConfig = TOY_DIFFICULTY) -> list[Scene]:
    return [make_scene(step_seed(seed, 0, i), cfg) for i in range(count)]

"""Synthetic planar two-view scenes with closed-form depth and view-consistent descriptors.

A scene is one plane ``n . X + d = 0`` (camera-1 frame) seen by two pinhole
cameras.  Depth from either camera is a ray-plane intersection, and the
descriptor of a pixel is a random-Fourier-feature function of the surface
point it sees, so both views agree exactly wherever they see the same point.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .correspondence import CorrespondenceSet, DepthMap, DescriptorField, sample_grid
from .geometry import CameraIntrinsics, Pose, project_unchecked, rotation_about_axis

MAX_ATTEMPTS = 1000
MAX_ROTATION_LIMIT_DEG = 45.0
MAX_BASELINE_LIMIT = 2.0

# substream tags for generators derived from a scene seed
_DEPTH_NOISE, _DESC_NOISE, _OBS_NOISE = 101, 202, 303


class ConfigError(ValueError):
    pass


class SceneError(RuntimeError):
    pass


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & (2**64 - 1) for k in keys]))


@dataclass(frozen=True)
class NoiseSpec:
    pixel_sigma: float = 0.0
    depth_sigma: float = 0.0
    outlier_fraction: float = 0.0
    descriptor_sigma: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (_is_number(v) and v >= 0):
                raise ConfigError(f"noise.{f.name}: must be a non-negative number")
        if self.outlier_fraction >= 1:
            raise ConfigError("noise.outlier_fraction: must be < 1")


_PAIR_FIELDS = ("width", "height", "focal", "baseline", "plane_distance")


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


@dataclass(frozen=True)
class DifficultyConfig:
    """Sampling ranges for :func:`make_scene`; ``(lo, hi)`` pairs are inclusive."""

    width: tuple[int, int] = (64, 256)
    height: tuple[int, int] = (64, 256)
    focal: tuple[float, float] = (80.0, 300.0)
    focal_jitter: float = 0.1          # camera-2 focal = camera-1 focal * U(1 - j, 1 + j)
    max_rotation_deg: float = 20.0
    baseline: tuple[float, float] = (0.0, 0.5)
    plane_distance: tuple[float, float] = (2.0, 5.0)
    max_tilt_deg: float = 30.0
    descriptor_dim: int = 24
    descriptor_frequency: float = 4.0  # rad/m, std of the Fourier frequencies
    min_overlap: float = 0.0           # fraction of stride-8 grid pixels visible in camera 2
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        def pair(name, lo_min):
            lo, hi = getattr(self, name)
            if not (lo_min <= lo <= hi):
                raise ConfigError(f"{name}: expected {lo_min} <= lo <= hi, got {(lo, hi)}")
        pair("width", 16)
        pair("height", 16)
        pair("focal", 1e-6)
        pair("baseline", 0.0)
        pair("plane_distance", 1e-6)
        if not 0 <= self.max_rotation_deg <= MAX_ROTATION_LIMIT_DEG:
            raise ConfigError(f"max_rotation_deg: must lie in [0, {MAX_ROTATION_LIMIT_DEG}]")
        if self.baseline[1] > MAX_BASELINE_LIMIT:
            raise ConfigError(f"baseline: upper bound must be <= {MAX_BASELINE_LIMIT}")
        if not 0 <= self.max_tilt_deg < 80:
            raise ConfigError("max_tilt_deg: must lie in [0, 80)")
        if not 0 <= self.focal_jitter < 1:
            raise ConfigError("focal_jitter: must lie in [0, 1)")
        if self.descriptor_dim < 1:
            raise ConfigError("descriptor_dim: must be >= 1")
        if not self.descriptor_frequency > 0:
            raise ConfigError("descriptor_frequency: must be positive")
        if not 0 <= self.min_overlap <= 1:
            raise ConfigError("min_overlap: must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "DifficultyConfig":
        """Build from parsed JSON; every error message starts with the offending field."""
        if not isinstance(d, dict):
            raise ConfigError("config: expected a JSON object")
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.name == "noise":
                if not isinstance(v, dict):
                    raise ConfigError("noise: expected an object")
                unknown = set(v) - {g.name for g in fields(NoiseSpec)}
                if unknown:
                    raise ConfigError(f"noise.{sorted(unknown)[0]}: unknown field")
                kw["noise"] = NoiseSpec(**v)
            elif f.name in _PAIR_FIELDS:
                if not (isinstance(v, (list, tuple)) and len(v) == 2 and all(_is_number(x) for x in v)):
                    raise ConfigError(f"{f.name}: expected a [lo, hi] pair of numbers")
                kw[f.name] = tuple(v)
            else:
                if not _is_number(v):
                    raise ConfigError(f"{f.name}: expected a number")
                kw[f.name] = v
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown field")
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Scene:
    seed: int
    k1: CameraIntrinsics
    k2: CameraIntrinsics
    gt_pose: Pose
    plane_normal: np.ndarray
    plane_offset: float
    descriptor_seed: int
    descriptor_dim: int = 24
    descriptor_frequency: float = 4.0
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        n = np.asarray(self.plane_normal, dtype=float).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise SceneError("plane normal must be unit length")
        object.__setattr__(self, "plane_normal", n)

    def plane_in(self, camera: int) -> tuple[np.ndarray, float]:
        """Plane (normal, offset) expressed in the given camera's frame."""
        if camera == 1:
            return self.plane_normal, self.plane_offset
        r, t = self.gt_pose.rotation, self.gt_pose.translation
        n2 = r @ self.plane_normal
        return n2, float(self.plane_offset - n2 @ t)

    def intrinsics(self, camera: int) -> CameraIntrinsics:
        return self.k1 if camera == 1 else self.k2

    def is_visible(self) -> bool:
        """Positive depth at all four image corners in both views."""
        for cam in (1, 2):
            k = self.intrinsics(cam)
            corners = np.array([[0, 0], [k.width - 1, 0], [0, k.height - 1], [k.width - 1, k.height - 1]], float)
            if not np.all(_ray_depth(k, corners, *self.plane_in(cam)) > 0):
                return False
        return True

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "k1": self.k1.to_dict(),
            "k2": self.k2.to_dict(),
            "gt_pose": self.gt_pose.to_dict(),
            "plane_normal": self.plane_normal.tolist(),
            "plane_offset": self.plane_offset,
            "descriptor_seed": self.descriptor_seed,
            "descriptor_dim": self.descriptor_dim,
            "descriptor_frequency": self.descriptor_frequency,
            "noise": asdict(self.noise),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(int(d["seed"]), CameraIntrinsics.from_dict(d["k1"]), CameraIntrinsics.from_dict(d["k2"]),
                   Pose.from_dict(d["gt_pose"]), np.array(d["plane_normal"], float), float(d["plane_offset"]),
                   int(d["descriptor_seed"]), int(d["descriptor_dim"]), float(d["descriptor_frequency"]),
                   NoiseSpec(**d["noise"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Scene":
        return cls.from_dict(json.loads(text))

    def descriptor_function(self) -> "DescriptorFunction":
        return DescriptorFunction(self.descriptor_seed, self.descriptor_dim, self.descriptor_frequency)


class DescriptorFunction:
    """Unit-normalised random Fourier features of a 3D point (camera-1 frame)."""

    def __init__(self, seed: int, dim: int = 24, frequency: float = 4.0):
        rng = _rng(seed)
        self.frequencies = rng.normal(0.0, frequency, size=(dim, 3))
        self.phases = rng.uniform(0.0, 2 * np.pi, size=dim)

    def __call__(self, X) -> np.ndarray:
        f = np.cos(np.asarray(X, dtype=float) @ self.frequencies.T + self.phases)
        return f / np.linalg.norm(f, axis=-1, keepdims=True)


def _pixel_rays(k: CameraIntrinsics, px) -> np.ndarray:
    px = np.asarray(px, dtype=float)
    return np.stack([(px[..., 0] - k.cx) / k.fx, (px[..., 1] - k.cy) / k.fy, np.ones(px.shape[:-1])], axis=-1)


def _ray_depth(k, px, normal, offset) -> np.ndarray:
    """Depth (z) at which each pixel ray meets the plane; non-positive means no hit."""
    denom = _pixel_rays(k, px) @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        z = -offset / denom
    return np.where(np.isfinite(z), z, -1.0)


def _pixel_grid(k: CameraIntrinsics) -> np.ndarray:
    uu, vv = np.meshgrid(np.arange(k.width, dtype=float), np.arange(k.height, dtype=float))
    return np.stack([uu, vv], axis=-1)


def _overlap(scene: Scene, stride: int = 8) -> float:
    grid = sample_grid(scene.k1.width, scene.k1.height, stride)
    z = _ray_depth(scene.k1, grid, scene.plane_normal, scene.plane_offset)
    X = _pixel_rays(scene.k1, grid) * z[:, None]
    px, front = project_unchecked(scene.k2, X @ scene.gt_pose.rotation.T + scene.gt_pose.translation)
    inside = front & scene.k2.contains(np.nan_to_num(px, nan=-1.0))
    return float(inside.mean()) if len(grid) else 0.0


def make_scene(seed: int, cfg: DifficultyConfig = DifficultyConfig()) -> Scene:
    rng = _rng(seed)
    for _ in range(MAX_ATTEMPTS):
        w = int(rng.integers(cfg.width[0], cfg.width[1] + 1))
        h = int(rng.integers(cfg.height[0], cfg.height[1] + 1))
        f = float(rng.uniform(*cfg.focal))
        f2 = f * float(rng.uniform(1 - cfg.focal_jitter, 1 + cfg.focal_jitter))
        k1 = CameraIntrinsics(f, f, w / 2.0, h / 2.0, w, h)
        k2 = CameraIntrinsics(f2, f2, w / 2.0, h / 2.0, w, h)

        rot = rotation_about_axis(rng.normal(size=3), rng.uniform(0.0, cfg.max_rotation_deg))
        direction = rng.normal(size=3)
        trans = direction / np.linalg.norm(direction) * rng.uniform(*cfg.baseline)
        pose = Pose(rot, trans)

        tilt_axis = np.array([*rng.normal(size=2), 0.0])
        tilt = rotation_about_axis(tilt_axis, rng.uniform(0.0, cfg.max_tilt_deg))
        normal = tilt @ np.array([0.0, 0.0, -1.0])
        normal /= np.linalg.norm(normal)
        offset = float(-normal[2] * rng.uniform(*cfg.plane_distance))

        desc_seed = int(rng.integers(0, 2**63))
        scene = Scene(int(seed), k1, k2, pose, normal, offset, desc_seed,
                      cfg.descriptor_dim, cfg.descriptor_frequency, cfg.noise)
        if scene.is_visible() and (cfg.min_overlap <= 0 or _overlap(scene) >= cfg.min_overlap):
            return scene
    raise SceneError(f"no visible scene after {MAX_ATTEMPTS} attempts")


def surface_points(scene: Scene, camera: int) -> np.ndarray:
    """(H, W, 3) surface point seen by every pixel, in that camera's frame."""
    k = scene.intrinsics(camera)
    px = _pixel_grid(k)
    z = _ray_depth(k, px, *scene.plane_in(camera))
    return _pixel_rays(k, px) * z[..., None]


def render_depth(scene: Scene, camera: int = 1, noisy: bool = True) -> DepthMap:
    k = scene.intrinsics(camera)
    z = _ray_depth(k, _pixel_grid(k), *scene.plane_in(camera))
    if noisy and scene.noise.depth_sigma > 0:
        z = z * (1.0 + scene.noise.depth_sigma * _rng(scene.seed, _DEPTH_NOISE, camera).normal(size=z.shape))
    return DepthMap.from_array(np.where(z > 0, z, np.nan))


def render_descriptors(scene: Scene, camera: int = 1) -> DescriptorField:
    """Descriptor field of one view.

    With ``noise.descriptor_sigma > 0`` a random block covering a quarter of
    the image gets gaussian descriptor noise, and its confidence drops to
    ``1 / (1 + sigma^2 * D)``.
    """
    X = surface_points(scene, camera)
    if camera == 2:
        X = (X - scene.gt_pose.translation) @ scene.gt_pose.rotation
    desc = scene.descriptor_function()(X)
    k = scene.intrinsics(camera)
    conf = np.ones((k.height, k.width))
    sigma = scene.noise.descriptor_sigma
    if sigma > 0:
        rng = _rng(scene.seed, _DESC_NOISE, camera)
        bh, bw = max(1, k.height // 2), max(1, k.width // 2)
        r0 = int(rng.integers(0, k.height - bh + 1))
        c0 = int(rng.integers(0, k.width - bw + 1))
        block = (slice(r0, r0 + bh), slice(c0, c0 + bw))
        noisy = desc[block] + sigma * rng.normal(size=desc[block].shape)
        desc[block] = noisy / np.linalg.norm(noisy, axis=-1, keepdims=True)
        conf[block] = 1.0 / (1.0 + sigma**2 * scene.descriptor_dim)
    return DescriptorField(desc, conf)


def gt_observations(scene: Scene, cs: CorrespondenceSet) -> np.ndarray:
    """Noise-free camera-2 pixels of each correspondence's 3D point (NaN if behind)."""
    p = scene.gt_pose
    px, _ = project_unchecked(scene.k2, cs.p3d @ p.rotation.T + p.translation)
    return px


def corrupt_correspondences(cs: CorrespondenceSet, observed, outlier_fraction: float, pixel_sigma: float,
                            rng: np.random.Generator, k2: CameraIntrinsics):
    """Contaminate observations of the valid entries.

    Inliers get gaussian pixel noise; ``round(fraction * n_valid)`` valid
    entries become outliers drawn uniformly over camera 2's image.  Returns
    the corrupted pixels and an inlier mask over all entries (entries that
    are not valid are left untouched and flagged as inliers).
    """
    if not 0 <= outlier_fraction < 1:
        raise ValueError("outlier_fraction must lie in [0, 1)")
    observed = np.array(observed, dtype=float).reshape(-1, 2)
    rows = cs.valid_indices
    n_out = int(round(outlier_fraction * len(rows)))
    out_rows = np.sort(rng.choice(rows, size=n_out, replace=False)) if n_out else np.array([], int)
    if pixel_sigma > 0:
        observed[rows] += pixel_sigma * rng.normal(size=(len(rows), 2))
    observed[out_rows] = rng.uniform([0.0, 0.0], [k2.width, k2.height], size=(n_out, 2))
    mask = np.ones(len(cs), dtype=bool)
    mask[out_rows] = False
    return observed, mask


def perturb_pose(p: Pose, degrees: float, rng: np.random.Generator) -> Pose:
    """Turn the rotation and the translation direction each by ``degrees`` about random axes."""
    R = rotation_about_axis(rng.normal(size=3), degrees) @ p.rotation
    t = rotation_about_axis(rng.normal(size=3), degrees) @ p.translation
    return Pose(R, t)


def scene_observations(scene: Scene, cs: CorrespondenceSet):
    """Camera-2 observations of ``cs`` under the scene's own noise settings (deterministic per scene)."""
    obs = gt_observations(scene, cs)
    return corrupt_correspondences(cs, obs, scene.noise.outlier_fraction, scene.noise.pixel_sigma,
                                   _rng(scene.seed, _OBS_NOISE), scene.k2)

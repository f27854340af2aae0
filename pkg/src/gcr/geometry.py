"""Camera and pose primitives.

Pixel convention: pixel (u, v) addresses column u, row v, and integer
coordinates sit on pixel centres.  Poses map camera-1 coordinates into
camera-2 coordinates, ``x2 = R @ x1 + t``.

Most functions broadcast over leading axes so the same code serves single
points and the batched paths used by RANSAC and the toy trainer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-9
_DEGENERATE_SV = 1e-12
_MIN_DEPTH = 1e-9
_MIN_NORM = 1e-9


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point outside image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, px: np.ndarray) -> np.ndarray:
        """Membership in the continuous rectangle [0, W) x [0, H)."""
        px = np.asarray(px, dtype=float)
        u, v = px[..., 0], px[..., 1]
        return (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> rotation @ x + translation`` (metres)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not is_rotation(r):
            raise GeometryError("rotation is not in SO(3)")
        if not np.all(np.isfinite(t)):
            raise GeometryError("translation is not finite")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_scale_direction(cls, rotation, scale: float, direction) -> "Pose":
        direction = np.asarray(direction, dtype=float)
        n = np.linalg.norm(direction)
        if n < _MIN_NORM:
            return cls(rotation, np.zeros(3))
        return cls(rotation, scale * direction / n)

    @property
    def matrix34(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def to_dict(self) -> dict:
        return {"R": self.rotation.tolist(), "t": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.array(d["R"], dtype=float), np.array(d["t"], dtype=float))

    def to_json(self) -> str:
        rows = ", ".join("[" + ", ".join(_g17(x) for x in row) + "]" for row in self.rotation)
        t = ", ".join(_g17(x) for x in self.translation)
        return '{"R": [' + rows + '], "t": [' + t + "]}"

    @classmethod
    def from_json(cls, text: str) -> "Pose":
        return cls.from_dict(json.loads(text))


def _g17(x: float) -> str:
    return format(float(x), ".17g")


def is_rotation(m, tol: float = ORTHO_TOL) -> bool:
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        return False
    return (np.abs(m.T @ m - np.eye(3)).max() <= tol
            and abs(np.linalg.det(m) - 1.0) <= tol)


def svd_orthogonalize(m9) -> np.ndarray:
    """Project a 3x3 matrix (or a stack of them) onto SO(3).

    Returns ``U diag(1, 1, det(U V^T)) V^T``, the rotation closest to the
    input in Frobenius norm.  Flattened 9-vectors are accepted as well.
    """
    m = np.asarray(m9, dtype=float)
    if m.shape[-1] == 9 and (m.ndim == 1 or m.shape[-2:] != (3, 3)):
        m = m.reshape(m.shape[:-1] + (3, 3))
    if not np.all(np.isfinite(m)):
        raise GeometryError("rotation underdetermined: non-finite input")
    u, s, vt = np.linalg.svd(m)
    if np.any(s[..., 1] < _DEGENERATE_SV):
        raise GeometryError("rotation underdetermined")
    d = np.sign(np.linalg.det(u @ vt))
    d = np.where(d == 0, 1.0, d)
    u = u.copy()
    u[..., :, 2] *= d[..., None]
    return u @ vt


def project(k: CameraIntrinsics, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    if np.any(z <= _MIN_DEPTH):
        raise GeometryError("behind camera")
    return np.stack([k.fx * p[..., 0] / z + k.cx, k.fy * p[..., 1] / z + k.cy], axis=-1)


def project_unchecked(k: CameraIntrinsics, p) -> tuple[np.ndarray, np.ndarray]:
    """Projection plus a front-of-camera mask; rear points project to NaN."""
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    front = z > _MIN_DEPTH
    zs = np.where(front, z, np.nan)
    px = np.stack([k.fx * p[..., 0] / zs + k.cx, k.fy * p[..., 1] / zs + k.cy], axis=-1)
    return px, front


def unproject(k: CameraIntrinsics, px, depth) -> np.ndarray:
    px = np.asarray(px, dtype=float)
    depth = np.asarray(depth, dtype=float)
    if np.any(~(depth > 0)):
        raise GeometryError("invalid depth")
    x = (px[..., 0] - k.cx) / k.fx * depth
    y = (px[..., 1] - k.cy) / k.fy * depth
    return np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)


def transform(p: Pose, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x @ p.rotation.T + p.translation


def rotation_error_deg(r1, r2) -> np.ndarray | float:
    """Geodesic angle between rotations, in degrees."""
    r1 = np.asarray(r1, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    tr = np.einsum("...ij,...ij->...", r1, r2)
    c = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
    out = np.degrees(np.arccos(c))
    return float(out) if out.ndim == 0 else out


def translation_direction_error_deg(t1, t2) -> np.ndarray | float:
    """Angle between translation directions; 0 when either is ~zero."""
    t1 = np.asarray(t1, dtype=float)
    t2 = np.asarray(t2, dtype=float)
    n1 = np.linalg.norm(t1, axis=-1)
    n2 = np.linalg.norm(t2, axis=-1)
    degenerate = (n1 < _MIN_NORM) | (n2 < _MIN_NORM)
    denom = np.where(degenerate, 1.0, n1 * n2)
    c = np.clip(np.sum(t1 * t2, axis=-1) / denom, -1.0, 1.0)
    out = np.where(degenerate, 0.0, np.degrees(np.arccos(c)))
    return float(out) if out.ndim == 0 else out


def pose_frobenius_distance(p1: Pose, p2: Pose) -> float:
    """Frobenius norm of the difference of the 3x4 [R | t] matrices."""
    return float(np.linalg.norm(p1.matrix34 - p2.matrix34))


def skew(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    z = np.zeros(w.shape[:-1])
    return np.stack([
        np.stack([z, -w[..., 2], w[..., 1]], axis=-1),
        np.stack([w[..., 2], z, -w[..., 0]], axis=-1),
        np.stack([-w[..., 1], w[..., 0], z], axis=-1),
    ], axis=-2)


def rotation_from_rotvec(w) -> np.ndarray:
    """Rodrigues' formula, broadcasting over leading axes."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    k = skew(w)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * k + b * (k @ k)


def rotation_about_axis(axis, degrees: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    return rotation_from_rotvec(axis / np.linalg.norm(axis) * math.radians(degrees))


def random_rotation(rng: np.random.Generator, max_deg: float = 180.0) -> np.ndarray:
    """Random axis, angle uniform in [0, max_deg]."""
    axis = rng.normal(size=3)
    return rotation_about_axis(axis, rng.uniform(0.0, max_deg))

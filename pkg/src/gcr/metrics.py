"""Pose AUC and descriptor cosine-error maps."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .correspondence import DepthMap, DescriptorField
from .geometry import CameraIntrinsics, Pose, project_unchecked, rotation_error_deg, translation_direction_error_deg
from .losses import _bilinear

AUC_THRESHOLDS = (5.0, 10.0, 20.0)


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class PoseErrorSample:
    rotation_deg: float
    translation_deg: float

    @property
    def combined(self) -> float:
        return max(self.rotation_deg, self.translation_deg)


def pose_error(p_est: Pose, p_gt: Pose) -> PoseErrorSample:
    return PoseErrorSample(rotation_error_deg(p_est.rotation, p_gt.rotation),
                           translation_direction_error_deg(p_est.translation, p_gt.translation))


def auc_at(errors, threshold: float) -> float:
    """Area under the accuracy-vs-threshold curve up to ``threshold``, in percent.

    Integrating the empirical CDF from 0 to the threshold gives, per sample,
    ``(threshold - min(error, threshold)) / threshold``; the AUC is the mean.
    """
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        raise MetricError("empty error list")
    if not threshold > 0:
        raise MetricError("threshold must be positive")
    if np.any(e < 0) or np.any(np.isnan(e)):
        raise MetricError("errors must be non-negative")
    return float(100.0 * np.mean((threshold - np.minimum(e, threshold)) / threshold))


def auc_trapezoid_reference(errors, threshold: float) -> float:
    """Independent AUC route: trapezoid rule over the explicit CDF staircase.

    Each sorted error contributes a vertical step, written as two vertices at
    the same abscissa, so the trapezoid rule integrates the step function
    exactly.
    """
    e = np.sort(np.asarray(errors, dtype=float).ravel())
    n = len(e)
    xs, ys = [0.0], [0.0]
    for i, x in enumerate(e):
        if x >= threshold:
            break
        xs += [x, x]
        ys += [i / n, (i + 1) / n]
    xs.append(threshold)
    ys.append(ys[-1])
    area = sum((xs[j + 1] - xs[j]) * (ys[j + 1] + ys[j]) / 2 for j in range(len(xs) - 1))
    return 100.0 * area / threshold


@dataclass(frozen=True, eq=False)
class ErrorMap:
    values: np.ndarray  # (H, W), NaN where invalid
    valid: np.ndarray   # (H, W) bool

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def valid_count(self) -> int:
        return int(self.valid.sum())

    @property
    def mean(self) -> float:
        return float(self.values[self.valid].mean())

    def histogram(self, bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
        return np.histogram(self.values[self.valid], bins=bins, range=(0.0, 1.0))

    def write_pgm(self, path) -> None:
        """16-bit binary PGM; invalid pixels are written as 0."""
        v = np.where(self.valid, self.values, 0.0)
        img = np.rint(np.clip(v, 0.0, 1.0) * 65535).astype(">u2")
        header = f"P5\n{self.width} {self.height}\n65535\n".encode("ascii")
        Path(path).write_bytes(header + img.tobytes())

    def sidecar(self) -> dict:
        return {"mean": self.mean, "valid_count": self.valid_count,
                "width": self.width, "height": self.height}

    def write_sidecar(self, path) -> None:
        Path(path).write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True))


def read_pgm16(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise MetricError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2").reshape(h, w)


def descriptor_error_map(f1: DescriptorField, f2: DescriptorField, depth1: DepthMap,
                         k1: CameraIntrinsics, k2: CameraIntrinsics, p: Pose) -> ErrorMap:
    """Per-pixel ``(1 - cos) / 2`` between view-1 descriptors and view-2 descriptors at the projection."""
    if (f1.width, f1.height) != (depth1.width, depth1.height):
        raise MetricError("descriptor field and depth map differ in size")
    uu, vv = np.meshgrid(np.arange(depth1.width, dtype=float), np.arange(depth1.height, dtype=float))
    z = np.where(depth1.valid, depth1.values, 1.0)
    X = np.stack([(uu - k1.cx) / k1.fx * z, (vv - k1.cy) / k1.fy * z, z], axis=-1)
    px, front = project_unchecked(k2, X @ p.rotation.T + p.translation)
    d2, _, inside = _bilinear(f2, np.where(front[..., None], px, -1.0))
    valid = depth1.valid & front & inside
    cos = np.einsum("hwk,hwk->hw", f1.descriptors, np.nan_to_num(d2))
    err = np.clip((1.0 - cos) / 2.0, 0.0, 1.0)
    if not valid.any():
        raise MetricError("no valid pixels")
    return ErrorMap(np.where(valid, err, np.nan), valid)

"""3D-2D correspondence formation from ground-truth depth, and descriptor-pair embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, Pose, project_unchecked

DEFAULT_STRIDE = 8
MIN_VALID_CORRESPONDENCES = 50


class CorrespondenceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DepthMap:
    values: np.ndarray  # (H, W) metres
    valid: np.ndarray   # (H, W) bool

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        valid = np.asarray(self.valid, dtype=bool)
        if values.ndim != 2 or values.shape != valid.shape:
            raise CorrespondenceError("depth values and mask must be matching 2D arrays")
        ok = valid & np.isfinite(values) & (values > 0)
        if np.any(valid != ok):
            raise CorrespondenceError("valid depth entries must be finite and positive")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_array(cls, values) -> "DepthMap":
        """Mask derived from the values: finite and positive entries are valid."""
        values = np.asarray(values, dtype=float)
        return cls(values, np.isfinite(values) & (values > 0))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class DescriptorField:
    descriptors: np.ndarray  # (H, W, D), unit rows
    confidence: np.ndarray   # (H, W) in [0, 1]

    def __post_init__(self):
        d = np.asarray(self.descriptors, dtype=float)
        c = np.asarray(self.confidence, dtype=float)
        if d.ndim != 3 or c.shape != d.shape[:2]:
            raise CorrespondenceError("descriptor field shapes are inconsistent")
        if np.abs(np.linalg.norm(d, axis=-1) - 1.0).max(initial=0.0) > 1e-6:
            raise CorrespondenceError("descriptors must be unit norm")
        if np.any((c < 0) | (c > 1)):
            raise CorrespondenceError("confidences must lie in [0, 1]")
        object.__setattr__(self, "descriptors", d)
        object.__setattr__(self, "confidence", c)

    @property
    def width(self) -> int:
        return self.descriptors.shape[1]

    @property
    def height(self) -> int:
        return self.descriptors.shape[0]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[2]


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Struct-of-arrays correspondence table.

    One row per grid pixel with valid camera-1 depth.  ``grid_index`` is the
    row's position in :func:`sample_grid` order and is what aligns these rows
    with embedding rows.  ``pixel2`` is NaN where the point lands behind
    camera 2.
    """

    p3d: np.ndarray        # (N, 3) camera-1 frame
    pixel1: np.ndarray     # (N, 2)
    pixel2: np.ndarray     # (N, 2) projection into camera 2 under the forming pose
    valid: np.ndarray      # (N,) bool
    grid_index: np.ndarray  # (N,) int
    stride: int

    def __len__(self) -> int:
        return len(self.valid)

    @property
    def valid_count(self) -> int:
        return int(np.count_nonzero(self.valid))

    @property
    def valid_indices(self) -> np.ndarray:
        return np.flatnonzero(self.valid)

    def subset(self, rows) -> "CorrespondenceSet":
        rows = np.asarray(rows)
        return CorrespondenceSet(self.p3d[rows], self.pixel1[rows], self.pixel2[rows],
                                 self.valid[rows], self.grid_index[rows], self.stride)


def sample_grid(width: int, height: int, stride: int) -> np.ndarray:
    """Cell-centre pixels of a regular grid, row-major, as an (M, 2) array."""
    if stride < 1:
        raise CorrespondenceError("stride must be >= 1")
    off = stride // 2
    us = np.arange(width // stride) * stride + off
    vs = np.arange(height // stride) * stride + off
    uu, vv = np.meshgrid(us, vs)
    return np.stack([uu.ravel(), vv.ravel()], axis=-1).astype(float)


def form_correspondences(depth1: DepthMap, k1: CameraIntrinsics, k2: CameraIntrinsics,
                         pose: Pose, stride: int = DEFAULT_STRIDE) -> CorrespondenceSet:
    """Unproject grid pixels of view 1, move them with ``pose`` and project into view 2."""
    if (depth1.width, depth1.height) != (k1.width, k1.height):
        raise CorrespondenceError("depth map does not match camera-1 intrinsics")
    grid = sample_grid(depth1.width, depth1.height, stride)
    cols = grid[:, 0].astype(int)
    rows = grid[:, 1].astype(int)
    keep = np.flatnonzero(depth1.valid[rows, cols])
    grid = grid[keep]
    d = depth1.values[rows[keep], cols[keep]]
    p3d = np.stack([(grid[:, 0] - k1.cx) / k1.fx * d, (grid[:, 1] - k1.cy) / k1.fy * d, d], axis=-1)
    p_cam2 = p3d @ pose.rotation.T + pose.translation
    px2, front = project_unchecked(k2, p_cam2)
    valid = front & k2.contains(np.nan_to_num(px2, nan=-1.0))
    return CorrespondenceSet(p3d, grid, px2, valid, keep, stride)


def build_embeddings(f1: DescriptorField, f2: DescriptorField, stride: int = DEFAULT_STRIDE,
                     grid_index=None) -> np.ndarray:
    """Concatenate co-located descriptors of both views at the grid pixels.

    Returns an (M, 2D) matrix in :func:`sample_grid` order, or only the rows
    listed in ``grid_index`` when given.
    """
    if f1.descriptors.shape != f2.descriptors.shape:
        raise CorrespondenceError("descriptor fields differ in shape")
    grid = sample_grid(f1.width, f1.height, stride).astype(int)
    if grid_index is not None:
        grid = grid[np.asarray(grid_index, dtype=int)]
    d1 = f1.descriptors[grid[:, 1], grid[:, 0]]
    d2 = f2.descriptors[grid[:, 1], grid[:, 0]]
    return np.concatenate([d1, d2], axis=1)


def embeddings_for(cs: CorrespondenceSet, f1: DescriptorField, f2: DescriptorField,
                   valid_only: bool = True) -> np.ndarray:
    """Embedding rows aligned with the (valid) rows of a correspondence set."""
    idx = cs.grid_index[cs.valid] if valid_only else cs.grid_index
    return build_embeddings(f1, f2, cs.stride, grid_index=idx)


def gate_sufficient(cs: CorrespondenceSet, minimum: int = MIN_VALID_CORRESPONDENCES) -> bool:
    return cs.valid_count > minimum

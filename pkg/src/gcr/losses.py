"""Pose, consistency and descriptor losses and their weighted total.

Angles are in degrees throughout.  The ``*_batch`` helpers take stacks of
rotations/translations so a trainer can evaluate many candidate poses at
once; the Pose-level functions are thin wrappers over them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .correspondence import CorrespondenceSet, DescriptorField
from ._kernels import descriptor_loss_kernel, descriptor_loss_table_kernel
from .geometry import CameraIntrinsics, Pose, rotation_error_deg, translation_direction_error_deg


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_pose: float = 0.8
    lambda_consistency: float = 0.1
    lambda_desc: float = 0.1

    def __post_init__(self):
        if min(self.lambda_pose, self.lambda_consistency, self.lambda_desc) < 0:
            raise LossError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossReport:
    pose_loss: float
    consistency_loss: float
    descriptor_loss: float
    total: float
    consistency_applied: bool

    def csv_row(self) -> str:
        return (f"{self.pose_loss!r},{self.consistency_loss!r},{self.descriptor_loss!r},"
                f"{self.total!r},{int(self.consistency_applied)}")

    CSV_HEADER = "pose,consistency,descriptor,total,gated"


def consistency_loss_batch(R, t, solver_R, solver_t):
    return rotation_error_deg(R, solver_R) + translation_direction_error_deg(t, solver_t)


def consistency_loss(p_reg: Pose, p_solver: Pose) -> float:
    """Rotation angle plus translation-direction angle between the two poses.

    ``p_solver`` plays the role of a fixed target; nothing upstream of it is
    differentiated.
    """
    return float(consistency_loss_batch(p_reg.rotation, p_reg.translation,
                                        p_solver.rotation, p_solver.translation))


def pose_loss_batch(R, t, gt_R, gt_t):
    scale = np.abs(np.linalg.norm(t, axis=-1) - np.linalg.norm(gt_t, axis=-1))
    return rotation_error_deg(R, gt_R) + translation_direction_error_deg(t, gt_t) + scale


def pose_loss(p_reg: Pose, p_gt: Pose) -> float:
    """Rotation angle + translation-direction angle + |translation norm difference| (m)."""
    return float(pose_loss_batch(p_reg.rotation, p_reg.translation, p_gt.rotation, p_gt.translation))


def _bilinear(f: DescriptorField, px):
    """Interpolate descriptors and confidence at continuous pixels.

    Returns (unit descriptors, confidences, inside-support mask); rows
    outside [0, W-1] x [0, H-1] are filled with NaN.
    """
    px = np.asarray(px, dtype=float)
    u, v = px[..., 0], px[..., 1]
    inside = (u >= 0) & (u <= f.width - 1) & (v >= 0) & (v <= f.height - 1)
    u = np.where(inside, u, 0.0)
    v = np.where(inside, v, 0.0)
    u0 = np.minimum(np.floor(u).astype(int), f.width - 2) if f.width > 1 else np.zeros(u.shape, int)
    v0 = np.minimum(np.floor(v).astype(int), f.height - 2) if f.height > 1 else np.zeros(v.shape, int)
    au = (u - u0)[..., None]
    av = (v - v0)[..., None]
    u1 = np.minimum(u0 + 1, f.width - 1)
    v1 = np.minimum(v0 + 1, f.height - 1)
    D, C = f.descriptors, f.confidence[..., None]
    def mix(T):
        return ((1 - av) * ((1 - au) * T[v0, u0] + au * T[v0, u1])
                + av * ((1 - au) * T[v1, u0] + au * T[v1, u1]))
    d = mix(D)
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        d = d / norm
    c = mix(C)[..., 0]
    d = np.where(inside[..., None], d, np.nan)
    c = np.where(inside, c, np.nan)
    return d, c, inside


def bilinear_sample(f: DescriptorField, px):
    """Unit descriptor and confidence at continuous pixel(s) ``px``.

    Raises when any pixel lies outside [0, W-1] x [0, H-1].
    """
    d, c, inside = _bilinear(f, px)
    if not np.all(inside):
        raise LossError("outside field")
    return d, c


def descriptor_loss_batch(R, t, src_desc, src_conf, p3d, f2: DescriptorField, k2: CameraIntrinsics):
    """Descriptor loss for a stack of poses (compiled path).

    R: (B, 3, 3), t: (B, 3); src_desc/src_conf/p3d describe the N contributing
    source points.  Returns (loss (B,), contributing count (B,)); the loss is
    NaN where no projection stays inside the field.
    """
    f = np.ascontiguousarray
    return descriptor_loss_kernel(f(R, dtype=float), f(t, dtype=float), f(p3d, dtype=float),
                                  f(src_desc, dtype=float), f(src_conf, dtype=float),
                                  f(f2.descriptors, dtype=float), f(f2.confidence, dtype=float),
                                  float(k2.fx), float(k2.fy), float(k2.cx), float(k2.cy))


def descriptor_tables(src_desc, f2: DescriptorField):
    """Dot products reused by every pose: (S (N, H, W), G (4, H, W)).

    S pairs each source descriptor with every target pixel; G pairs each
    target pixel with its right, lower, diagonal and anti-diagonal neighbour
    (clamped at the border).
    """
    D = f2.descriptors
    S = np.einsum("nk,hwk->nhw", np.asarray(src_desc, dtype=float), D)
    H, W = f2.height, f2.width
    r = np.minimum(np.arange(W) + 1, W - 1)
    d = np.minimum(np.arange(H) + 1, H - 1)
    right, down = D[:, r], D[d]
    diag = D[d][:, r]
    G = np.stack([np.einsum("hwk,hwk->hw", D, right), np.einsum("hwk,hwk->hw", D, down),
                  np.einsum("hwk,hwk->hw", D, diag), np.einsum("hwk,hwk->hw", right, down)])
    return np.ascontiguousarray(S), np.ascontiguousarray(G)


def descriptor_loss_tabled(R, t, p3d, rows, src_conf, tables, f2: DescriptorField, k2: CameraIntrinsics):
    """``descriptor_loss_batch`` over source rows ``rows`` using ``descriptor_tables`` output."""
    f = np.ascontiguousarray
    S, G = tables
    return descriptor_loss_table_kernel(f(R, dtype=float), f(t, dtype=float), f(p3d, dtype=float),
                                        f(rows, dtype=np.int64), f(src_conf, dtype=float), S, G,
                                        f(f2.confidence, dtype=float),
                                        float(k2.fx), float(k2.fy), float(k2.cx), float(k2.cy))


def descriptor_loss_batch_reference(R, t, src_desc, src_conf, p3d, f2: DescriptorField, k2: CameraIntrinsics):
    """Pure numpy version of ``descriptor_loss_batch``, kept as a cross-check."""
    y = np.einsum("bij,nj->bni", R, p3d) + t[:, None]
    z = y[..., 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    px = np.stack([k2.fx * y[..., 0] / zs + k2.cx, k2.fy * y[..., 1] / zs + k2.cy], axis=-1)
    px = np.where(front[..., None], px, -1.0)
    d, c, inside = _bilinear(f2, px)
    sim = np.einsum("bnk,nk->bn", np.nan_to_num(d), src_desc)
    w = np.where(inside, src_conf * np.nan_to_num(c), 0.0)
    wsum = w.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        loss = -(w * sim).sum(axis=1) / wsum
    count = inside.sum(axis=1)
    return np.where(wsum > 0, loss, np.nan), count


def descriptor_loss(f1: DescriptorField, f2: DescriptorField, cs: CorrespondenceSet, p_reg: Pose,
                    k2: CameraIntrinsics) -> float:
    """Negative confidence-weighted cosine similarity over the valid correspondences.

    Source descriptors are read at each entry's camera-1 pixel; target
    descriptors are bilinearly sampled in ``f2`` where ``p_reg`` projects
    the entry's 3D point.  Weights are the product of the two confidences,
    normalised over the entries whose projection stays inside ``f2``.
    """
    rows = cs.valid_indices
    px1 = np.rint(cs.pixel1[rows]).astype(int)
    src = f1.descriptors[px1[:, 1], px1[:, 0]]
    conf = f1.confidence[px1[:, 1], px1[:, 0]]
    loss, _ = descriptor_loss_batch(p_reg.rotation[None], p_reg.translation[None], src, conf,
                                    cs.p3d[rows], f2, k2)
    if not np.isfinite(loss[0]):
        raise LossError("no descriptor support")
    return float(loss[0])


def total_loss(pose: float, consistency: float, descriptor: float,
               lw: LossWeights = LossWeights(), gated: bool = True) -> LossReport:
    """Weighted sum of the three terms; ``gated=False`` drops the consistency term."""
    cons = consistency if gated else 0.0
    total = lw.lambda_pose * pose + lw.lambda_consistency * cons + lw.lambda_desc * descriptor
    return LossReport(float(pose), float(cons), float(descriptor), float(total), bool(gated))

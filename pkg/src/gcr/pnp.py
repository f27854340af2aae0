"""EPnP-style minimal-set pose solver with Gauss-Newton refinement.

The solver is written over a batch axis: RANSAC hands it every minimal set
of a run at once.  :func:`solve_pnp` is the single-sample wrapper that turns
failure codes into exceptions.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from ._kernels import gauss_newton_kernel
from .correspondence import CorrespondenceSet
from .geometry import CameraIntrinsics, Pose

MIN_POINTS = 6
PLANAR_RATIO = 1e-8
MAX_CONDITION = 1e10
GN_MAX_ITERS = 10
GN_TOL = 1e-10
INLIER_THRESHOLD = 2.0

OK = 0
DEGENERATE = 1
CHEIRALITY = 2
NUMERICAL = 3

_MESSAGES = {DEGENERATE: "degenerate sample", CHEIRALITY: "cheirality failure",
             NUMERICAL: "numerical failure"}


class PnpError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PnpSample:
    points3d: np.ndarray   # (n, 3), camera-1 frame
    pixels2d: np.ndarray   # (n, 2), camera-2 image
    intrinsics2: CameraIntrinsics

    def __post_init__(self):
        p = np.asarray(self.points3d, dtype=float)
        q = np.asarray(self.pixels2d, dtype=float)
        if p.ndim != 2 or p.shape[1] != 3 or q.shape != (len(p), 2):
            raise PnpError("points and pixels must be aligned (n,3) and (n,2) arrays")
        if len(p) < MIN_POINTS:
            raise PnpError(f"need at least {MIN_POINTS} correspondences")
        object.__setattr__(self, "points3d", p)
        object.__setattr__(self, "pixels2d", q)


def solve_pnp(s: PnpSample) -> Pose:
    r, t, status = solve_pnp_batch(s.points3d[None], s.pixels2d[None], s.intrinsics2)
    if status[0] != OK:
        raise PnpError(_MESSAGES[int(status[0])])
    return Pose(r[0], t[0])


def _intrinsics_columns(k, B: int) -> np.ndarray:
    """(B, 4) array of fx, fy, cx, cy from one CameraIntrinsics or per-problem rows."""
    if isinstance(k, CameraIntrinsics):
        return np.tile([k.fx, k.fy, k.cx, k.cy], (B, 1)).astype(float)
    kk = np.asarray(k, dtype=float)
    if kk.shape != (B, 4):
        raise PnpError("per-problem intrinsics must be a (B, 4) array of fx, fy, cx, cy")
    return kk


def solve_pnp_batch(points, pixels, k, refine: bool = True):
    """Solve B independent PnP problems.

    points: (B, n, 3), pixels: (B, n, 2); ``k`` is one CameraIntrinsics or a
    (B, 4) array of per-problem fx, fy, cx, cy.  Returns rotations (B, 3, 3),
    translations (B, 3) and an int status per problem (``OK``,
    ``DEGENERATE``, ``CHEIRALITY`` or ``NUMERICAL``).  Failed entries hold
    NaN pose values.
    """
    X = np.asarray(points, dtype=float)
    uv = np.asarray(pixels, dtype=float)
    B, n, _ = X.shape
    if n < MIN_POINTS:
        raise PnpError(f"need at least {MIN_POINTS} correspondences")
    kk = _intrinsics_columns(k, B)
    fx, fy, cx, cy = (kk[:, i:i + 1] for i in range(4))
    xn = np.stack([(uv[..., 0] - cx) / fx, (uv[..., 1] - cy) / fy], axis=-1)

    c0 = X.mean(axis=1)
    A = X - c0[:, None]
    w, V = np.linalg.eigh(np.einsum("bni,bnj->bij", A, A) / n)
    w = np.maximum(w, 0.0)

    status = np.zeros(B, dtype=int)
    R = np.full((B, 3, 3), np.nan)
    t = np.full((B, 3), np.nan)

    planar = w[:, 0] < PLANAR_RATIO * w[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(planar, np.sqrt(w[:, 2] / w[:, 1]), np.sqrt(w[:, 2] / w[:, 0]))
    degenerate = ~(w[:, 2] > 0) | ~(cond <= MAX_CONDITION)
    status[degenerate] = DEGENERATE

    for is_planar, axes in ((False, slice(0, 3)), (True, slice(1, 3))):
        idx = np.flatnonzero((planar == is_planar) & ~degenerate)
        if idx.size == 0:
            continue
        r_i, t_i = _closed_form(X[idx], xn[idx], c0[idx], V[idx][:, :, axes], w[idx][:, axes])
        R[idx], t[idx] = r_i, t_i

    live = status == OK
    if refine and np.any(live):
        idx = np.flatnonzero(live)
        R[idx], t[idx] = _gauss_newton(X[idx], uv[idx], R[idx], t[idx], kk[idx])

    bad = live & ~(np.isfinite(R).all(axis=(1, 2)) & np.isfinite(t).all(axis=1))
    status[bad] = NUMERICAL
    live = status == OK
    depth = np.einsum("bij,bnj->bni", R, X)[..., 2] + t[:, None, 2]
    behind = live & np.all(~(depth > 0), axis=1)
    status[behind] = CHEIRALITY
    R[status != OK] = np.nan
    t[status != OK] = np.nan
    return R, t, status


def _closed_form(X, xn, c0, axes, variances):
    """Control-point solve for one group (4 control points, or 3 when planar)."""
    B, n, _ = X.shape
    sd = np.sqrt(variances)                                    # (B, m-1)
    coords = np.einsum("bni,bij->bnj", X - c0[:, None], axes) / sd[:, None]
    alphas = np.concatenate([1.0 - coords.sum(axis=2, keepdims=True), coords], axis=2)
    m = alphas.shape[2]
    cw = np.concatenate([c0[:, None], c0[:, None] + (axes * sd[:, None]).transpose(0, 2, 1)], axis=1)

    ones = np.ones_like(xn[..., 0])
    zeros = np.zeros_like(ones)
    row_u = np.stack([ones, zeros, -xn[..., 0]], axis=-1)      # (B, n, 3)
    row_v = np.stack([zeros, ones, -xn[..., 1]], axis=-1)
    Mu = (alphas[..., None] * row_u[:, :, None, :]).reshape(B, n, 3 * m)
    Mv = (alphas[..., None] * row_v[:, :, None, :]).reshape(B, n, 3 * m)
    M = np.concatenate([Mu, Mv], axis=1)
    _, ev = np.linalg.eigh(np.einsum("bki,bkj->bij", M, M))
    v1 = ev[:, :, 0].reshape(B, m, 3)
    v2 = ev[:, :, 1].reshape(B, m, 3)

    pairs = np.array(list(combinations(range(m), 2)))
    dw = cw[:, pairs[:, 0]] - cw[:, pairs[:, 1]]
    dw2 = np.einsum("bpi,bpi->bp", dw, dw)

    # one-dimensional kernel: scale fixed by control-point distances
    d1 = v1[:, pairs[:, 0]] - v1[:, pairs[:, 1]]
    n1 = np.linalg.norm(d1, axis=2)
    beta = (n1 * np.sqrt(dw2)).sum(axis=1) / (n1 * n1).sum(axis=1)
    cand1 = beta[:, None, None] * v1

    # two-dimensional kernel: linearised distance constraints
    d2 = v2[:, pairs[:, 0]] - v2[:, pairs[:, 1]]
    L = np.stack([np.einsum("bpi,bpi->bp", d1, d1), 2 * np.einsum("bpi,bpi->bp", d1, d2),
                  np.einsum("bpi,bpi->bp", d2, d2)], axis=-1)
    b = np.einsum("bij,bj->bi", np.linalg.pinv(L), dw2)
    b1 = np.sqrt(np.abs(b[:, 0]))
    b2 = np.sqrt(np.abs(b[:, 2])) * np.where(b[:, 1] < 0, -1.0, 1.0)
    cand2 = b1[:, None, None] * v1 + b2[:, None, None] * v2

    best_r = best_t = best_err = None
    for cc in (cand1, cand2):
        pc = np.einsum("bnj,bji->bni", alphas, cc)
        flip = pc[..., 2].mean(axis=1) < 0
        pc[flip] *= -1.0
        r, t = _kabsch(X, pc)
        y = np.einsum("bij,bnj->bni", r, X) + t[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            res = y[..., :2] / y[..., 2:3] - xn
        err = np.nan_to_num(np.einsum("bni,bni->b", res, res), nan=np.inf)
        if best_r is None:
            best_r, best_t, best_err = r, t, err
        else:
            take = err < best_err
            best_r = np.where(take[:, None, None], r, best_r)
            best_t = np.where(take[:, None], t, best_t)
            best_err = np.minimum(err, best_err)
    return best_r, best_t


def _kabsch(src, dst):
    """Rigid (no scale) alignment dst ≈ R src + t, batched."""
    ms = src.mean(axis=1)
    md = dst.mean(axis=1)
    H = np.einsum("bni,bnj->bij", src - ms[:, None], dst - md[:, None])
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.einsum("bji,bkj->bik", Vt, U)))
    d = np.where(d == 0, 1.0, d)
    Vt = Vt.copy()
    Vt[:, 2, :] *= d[:, None]
    R = np.einsum("bji,bkj->bik", Vt, U)
    return R, md - np.einsum("bij,bj->bi", R, ms)


def _gauss_newton(X, uv, R, t, kk):
    """Refine reprojection error in pixels with left-multiplicative rotation updates."""
    return gauss_newton_kernel(np.ascontiguousarray(X), np.ascontiguousarray(uv), np.ascontiguousarray(R),
                               np.ascontiguousarray(t), np.ascontiguousarray(kk), GN_MAX_ITERS, GN_TOL)


def reprojection_errors_batch(R, t, p3d, observed, k: CameraIntrinsics) -> np.ndarray:
    """Pixel errors of N points under B poses, (B, N); +inf behind the camera."""
    y = np.einsum("bij,nj->bni", R, p3d) + t[:, None]
    z = y[..., 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    du = k.fx * y[..., 0] / zs + k.cx - observed[:, 0]
    dv = k.fy * y[..., 1] / zs + k.cy - observed[:, 1]
    err = np.hypot(du, dv)
    return np.where(front & np.isfinite(err), err, np.inf)


def reprojection_errors(p: Pose, cs: CorrespondenceSet | np.ndarray, pixels2d_observed,
                        k2: CameraIntrinsics) -> np.ndarray:
    """Pixel distance between each projected point and its observation.

    ``cs`` may be a correspondence set (its ``p3d`` rows are used) or a plain
    (N, 3) point array.
    """
    p3d = cs.p3d if isinstance(cs, CorrespondenceSet) else np.asarray(cs, dtype=float)
    obs = np.asarray(pixels2d_observed, dtype=float).reshape(-1, 2)
    if len(obs) != len(p3d):
        raise PnpError("points and observations are not aligned")
    return reprojection_errors_batch(p.rotation[None], p.translation[None], p3d, obs, k2)[0]


def count_inliers(errors, threshold: float = INLIER_THRESHOLD) -> int:
    if threshold <= 0:
        raise PnpError("threshold must be positive")
    return int(np.count_nonzero(np.asarray(errors, dtype=float) < threshold))

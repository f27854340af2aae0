"""Compiled inner loops for the training hot path."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def descriptor_loss_kernel(R, t, p3d, src_desc, src_conf, desc2, conf2, fx, fy, cx, cy):
    """Confidence-weighted negative cosine for B poses; NaN where nothing lands inside.

    Same arithmetic as the numpy path in ``losses``: bilinear mix of the four
    neighbours, renormalised, support [0, W-1] x [0, H-1].
    """
    B = R.shape[0]
    N = p3d.shape[0]
    H, W, D = desc2.shape
    loss = np.empty(B)
    count = np.zeros(B, dtype=np.int64)
    d = np.empty(D)
    for b in range(B):
        acc = 0.0
        wsum = 0.0
        for n in range(N):
            x = R[b, 0, 0] * p3d[n, 0] + R[b, 0, 1] * p3d[n, 1] + R[b, 0, 2] * p3d[n, 2] + t[b, 0]
            y = R[b, 1, 0] * p3d[n, 0] + R[b, 1, 1] * p3d[n, 1] + R[b, 1, 2] * p3d[n, 2] + t[b, 1]
            z = R[b, 2, 0] * p3d[n, 0] + R[b, 2, 1] * p3d[n, 1] + R[b, 2, 2] * p3d[n, 2] + t[b, 2]
            if not z > 1e-9:
                continue
            u = fx * x / z + cx
            v = fy * y / z + cy
            if not (u >= 0 and u <= W - 1 and v >= 0 and v <= H - 1):
                continue
            count[b] += 1
            u0 = min(int(np.floor(u)), W - 2) if W > 1 else 0
            v0 = min(int(np.floor(v)), H - 2) if H > 1 else 0
            u1 = min(u0 + 1, W - 1)
            v1 = min(v0 + 1, H - 1)
            au = u - u0
            av = v - v0
            w00 = (1 - av) * (1 - au)
            w01 = (1 - av) * au
            w10 = av * (1 - au)
            w11 = av * au
            nrm = 0.0
            for k in range(D):
                d[k] = (w00 * desc2[v0, u0, k] + w01 * desc2[v0, u1, k]
                        + w10 * desc2[v1, u0, k] + w11 * desc2[v1, u1, k])
                nrm += d[k] * d[k]
            nrm = np.sqrt(nrm)
            sim = 0.0
            if nrm > 0:
                for k in range(D):
                    sim += d[k] * src_desc[n, k]
                sim /= nrm
            c = w00 * conf2[v0, u0] + w01 * conf2[v0, u1] + w10 * conf2[v1, u0] + w11 * conf2[v1, u1]
            wi = src_conf[n] * c
            acc += wi * sim
            wsum += wi
        loss[b] = -acc / wsum if wsum > 0 else np.nan
    return loss, count


@njit(cache=True)
def _solve_small(A, b, out):
    """Gaussian elimination with partial pivoting; False when singular."""
    n = A.shape[0]
    M = A.copy()
    y = b.copy()
    for c in range(n):
        p = c
        for r in range(c + 1, n):
            if abs(M[r, c]) > abs(M[p, c]):
                p = r
        if not abs(M[p, c]) > 0.0:
            return False
        if p != c:
            for j in range(n):
                tmp = M[c, j]
                M[c, j] = M[p, j]
                M[p, j] = tmp
            tmp = y[c]
            y[c] = y[p]
            y[p] = tmp
        for r in range(c + 1, n):
            f = M[r, c] / M[c, c]
            for j in range(c, n):
                M[r, j] -= f * M[c, j]
            y[r] -= f * y[c]
    for c in range(n - 1, -1, -1):
        s = y[c]
        for j in range(c + 1, n):
            s -= M[c, j] * out[j]
        out[c] = s / M[c, c]
    return True


@njit(cache=True)
def _rodrigues(w, out):
    th = np.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    if th < 1e-8:
        a = 1.0 - th * th / 6.0
        b = 0.5 - th * th / 24.0
    else:
        a = np.sin(th) / th
        b = (1.0 - np.cos(th)) / (th * th)
    K = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    K2 = K @ K
    for i in range(3):
        for j in range(3):
            out[i, j] = (1.0 if i == j else 0.0) + a * K[i, j] + b * K2[i, j]


@njit(cache=True)
def gauss_newton_kernel(X, uv, R, t, kk, max_iters, tol):
    """Pixel reprojection refinement per problem, left-multiplicative rotation update.

    Returns refined R, t; problems whose normal equations go singular or
    non-finite come back as NaN.
    """
    B, n, _ = X.shape
    R = R.copy()
    t = t.copy()
    J = np.empty((2 * n, 6))
    res = np.empty(2 * n)
    JtJ = np.empty((6, 6))
    Jtr = np.empty(6)
    delta = np.empty(6)
    dR = np.empty((3, 3))
    for bi in range(B):
        fx, fy, cx, cy = kk[bi, 0], kk[bi, 1], kk[bi, 2], kk[bi, 3]
        failed = False
        for _ in range(max_iters):
            finite = True
            for i in range(n):
                a = R[bi, 0, 0] * X[bi, i, 0] + R[bi, 0, 1] * X[bi, i, 1] + R[bi, 0, 2] * X[bi, i, 2]
                b = R[bi, 1, 0] * X[bi, i, 0] + R[bi, 1, 1] * X[bi, i, 1] + R[bi, 1, 2] * X[bi, i, 2]
                c = R[bi, 2, 0] * X[bi, i, 0] + R[bi, 2, 1] * X[bi, i, 1] + R[bi, 2, 2] * X[bi, i, 2]
                z = c + t[bi, 2]
                if z == 0.0:
                    finite = False
                    break
                iz = 1.0 / z
                x_ = (a + t[bi, 0]) * iz
                y_ = (b + t[bi, 1]) * iz
                res[i] = fx * x_ + cx - uv[bi, i, 0]
                res[n + i] = fy * y_ + cy - uv[bi, i, 1]
                fu = fx * iz
                fv = fy * iz
                J[i, 0] = -fu * x_ * b
                J[i, 1] = fu * (c + x_ * a)
                J[i, 2] = -fu * b
                J[i, 3] = fu
                J[i, 4] = 0.0
                J[i, 5] = -fu * x_
                J[n + i, 0] = -fv * (c + y_ * b)
                J[n + i, 1] = fv * y_ * a
                J[n + i, 2] = fv * a
                J[n + i, 3] = 0.0
                J[n + i, 4] = fv
                J[n + i, 5] = -fv * y_
            if not finite:
                failed = True
                break
            for p in range(6):
                s = 0.0
                for r in range(2 * n):
                    s += J[r, p] * res[r]
                Jtr[p] = -s
                for q in range(6):
                    s = 0.0
                    for r in range(2 * n):
                        s += J[r, p] * J[r, q]
                    JtJ[p, q] = s
            if not (np.all(np.isfinite(JtJ)) and np.all(np.isfinite(Jtr))):
                failed = True
                break
            if not _solve_small(JtJ, Jtr, delta) or not np.all(np.isfinite(delta)):
                failed = True
                break
            _rodrigues(delta[:3], dR)
            Rn = dR @ R[bi]
            for i in range(3):
                for j in range(3):
                    R[bi, i, j] = Rn[i, j]
                t[bi, i] += delta[3 + i]
            if np.sqrt(np.sum(delta * delta)) < tol:
                break
        if failed:
            R[bi] = np.nan
            t[bi] = np.nan
    return R, t


@njit(cache=True)
def descriptor_loss_table_kernel(R, t, p3d, rows, src_conf, S, G, conf2, fx, fy, cx, cy):
    """``descriptor_loss_kernel`` from precomputed dot products (unit target descriptors).

    S[r, v, u] = src_desc[r] . desc2[v, u] for every source row r; G[k, v, u]
    holds the neighbour products inside the cell anchored at (u, v): right,
    down, diagonal, anti-diagonal.  ``rows`` picks the contributing source rows.
    """
    B = R.shape[0]
    H, W = conf2.shape
    loss = np.empty(B)
    count = np.zeros(B, dtype=np.int64)
    for b in range(B):
        acc = 0.0
        wsum = 0.0
        for i in range(rows.shape[0]):
            r = rows[i]
            x = R[b, 0, 0] * p3d[r, 0] + R[b, 0, 1] * p3d[r, 1] + R[b, 0, 2] * p3d[r, 2] + t[b, 0]
            y = R[b, 1, 0] * p3d[r, 0] + R[b, 1, 1] * p3d[r, 1] + R[b, 1, 2] * p3d[r, 2] + t[b, 1]
            z = R[b, 2, 0] * p3d[r, 0] + R[b, 2, 1] * p3d[r, 1] + R[b, 2, 2] * p3d[r, 2] + t[b, 2]
            if not z > 1e-9:
                continue
            u = fx * x / z + cx
            v = fy * y / z + cy
            if not (u >= 0 and u <= W - 1 and v >= 0 and v <= H - 1):
                continue
            count[b] += 1
            u0 = min(int(np.floor(u)), W - 2) if W > 1 else 0
            v0 = min(int(np.floor(v)), H - 2) if H > 1 else 0
            u1 = min(u0 + 1, W - 1)
            v1 = min(v0 + 1, H - 1)
            au = u - u0
            av = v - v0
            w00 = (1 - av) * (1 - au)
            w01 = (1 - av) * au
            w10 = av * (1 - au)
            w11 = av * au
            n2 = (w00 * w00 + w01 * w01 + w10 * w10 + w11 * w11
                  + 2.0 * (w00 * w01 * G[0, v0, u0] + w10 * w11 * G[0, v1, u0]
                           + w00 * w10 * G[1, v0, u0] + w01 * w11 * G[1, v0, u1]
                           + w00 * w11 * G[2, v0, u0] + w01 * w10 * G[3, v0, u0]))
            sim = 0.0
            if n2 > 0:
                sim = (w00 * S[r, v0, u0] + w01 * S[r, v0, u1] + w10 * S[r, v1, u0]
                       + w11 * S[r, v1, u1]) / np.sqrt(n2)
            c = w00 * conf2[v0, u0] + w01 * conf2[v0, u1] + w10 * conf2[v1, u0] + w11 * conf2[v1, u1]
            wi = src_conf[r] * c
            acc += wi * sim
            wsum += wi
        loss[b] = -acc / wsum if wsum > 0 else np.nan
    return loss, count

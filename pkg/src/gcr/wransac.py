"""Weighted RANSAC with prior-guided hypothesis scoring.

Each iteration draws a minimal set with probability proportional to the
correspondence weights, solves PnP, counts reprojection inliers and scores

    score = n_inliers + beta * exp(-||P_candidate - P_prior||_F / tau)

The best score over a fixed number of iterations wins; ties go to the
earliest iteration.  Every iteration draws from its own generator seeded by
``(seed, iteration)``, so the samples do not depend on evaluation order and
all hypotheses are solved in one batch.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from itertools import combinations

import numpy as np

from .correspondence import MIN_VALID_CORRESPONDENCES, CorrespondenceSet
from .geometry import CameraIntrinsics, Pose, pose_frobenius_distance
from .pnp import MIN_POINTS, OK, reprojection_errors_batch, solve_pnp_batch

ORACLE_MAX_CORRESPONDENCES = 12


class RansacError(RuntimeError):
    pass


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 50
    sample_size: int = 6
    inlier_threshold: float = 2.0
    beta: float = 0.5
    tau: float = 10.0
    seed: int = 0
    # tests may run below the correspondence gate
    require_gate: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.sample_size < MIN_POINTS:
            raise ValueError(f"sample_size must be >= {MIN_POINTS}")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "RansacConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass(frozen=True)
class TraceEntry:
    iter: int
    indices: tuple[int, ...]
    score: float | None   # None when the minimal set was degenerate
    inliers: int | None


@dataclass(eq=False)
class RansacResult:
    pose: Pose
    score: float
    inlier_count: int
    iterations_run: int
    prior: Pose
    beta: float
    tau: float
    best_iteration: int
    # (entry indices per iteration, status, scores, inliers); expanded on first access
    trace_arrays: tuple = field(default=(), repr=False)

    @cached_property
    def trace(self) -> list[TraceEntry]:
        if not self.trace_arrays:
            return []
        indices, status, scores, inliers = self.trace_arrays
        return [TraceEntry(i, tuple(int(j) for j in indices[i]),
                           None if status[i] != OK else float(scores[i]),
                           None if status[i] != OK else int(inliers[i]))
                for i in range(len(indices))]

    def recomputed_score(self) -> float:
        return score_hypothesis(self.pose, self.inlier_count, self.prior, self.beta, self.tau)

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(asdict(e)) + "\n" for e in self.trace)


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), iteration]))


def weighted_sample(weights, k: int, rng: np.random.Generator) -> np.ndarray:
    """Draw k distinct indices, each draw proportional to the remaining weight."""
    w = np.array(weights, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise RansacError("weights must be finite and non-negative")
    if np.count_nonzero(w > 0) < k:
        raise RansacError("insufficient support")
    out = np.empty(k, dtype=int)
    for j in range(k):
        c = np.cumsum(w)
        i = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
        # guard against landing on a zero-weight tail through rounding
        while w[min(i, len(w) - 1)] <= 0:
            i -= 1
        i = min(i, len(w) - 1)
        out[j] = i
        w[i] = 0.0
    return out


def weighted_samples(weights, k: int, seed: int, iterations: int) -> np.ndarray:
    """``weighted_sample`` for iterations ``0..iterations-1``, vectorised over iterations.

    Draws the same uniforms in the same order, so row ``i`` equals
    ``weighted_sample(weights, k, iteration_rng(seed, i))``.
    """
    w = np.array(weights, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise RansacError("weights must be finite and non-negative")
    if np.count_nonzero(w > 0) < k:
        raise RansacError("insufficient support")
    u = np.stack([iteration_rng(seed, i).random(k) for i in range(iterations)]).reshape(iterations, k)
    W = np.tile(w, (iterations, 1))
    n = len(w)
    out = np.empty((iterations, k), dtype=int)
    ar = np.arange(iterations)
    for j in range(k):
        c = np.cumsum(W, axis=1)
        target = u[:, j] * c[:, -1]
        idx = np.minimum(np.count_nonzero(c <= target[:, None], axis=1), n - 1)
        for r in np.flatnonzero(W[ar, idx] <= 0):
            i = idx[r]
            while W[r, i] <= 0:
                i -= 1
            idx[r] = i
        out[:, j] = idx
        W[ar, idx] = 0.0
    return out


def score_hypothesis(p_cand: Pose, inlier_count: int, p_reg: Pose, beta: float, tau: float) -> float:
    return inlier_count + beta * math.exp(-pose_frobenius_distance(p_cand, p_reg) / tau)


def _score_batch(R, t, status, p3d, observed, p_reg: Pose, k2, cfg: RansacConfig):
    """Inlier counts and scores for a batch of hypotheses (NaN score where failed)."""
    ok = status == OK
    inliers = np.zeros(len(R), dtype=int)
    scores = np.full(len(R), np.nan)
    if np.any(ok):
        err = reprojection_errors_batch(R[ok], t[ok], p3d, observed, k2)
        inliers[ok] = np.count_nonzero(err < cfg.inlier_threshold, axis=1)
        diff = np.concatenate([R[ok] - p_reg.rotation, (t[ok] - p_reg.translation)[..., None]], axis=2)
        dist = np.sqrt(np.einsum("bij,bij->b", diff, diff))
        scores[ok] = inliers[ok] + cfg.beta * np.exp(-dist / cfg.tau)
    return inliers, scores


def _evaluate(samples: np.ndarray, p3d, observed, p_reg, k2, cfg):
    samples = np.sort(samples, axis=1)
    R, t, status = solve_pnp_batch(p3d[samples], observed[samples], k2)
    inliers, scores = _score_batch(R, t, status, p3d, observed, p_reg, k2, cfg)
    return samples, R, t, status, inliers, scores


def _pick(samples, R, t, status, inliers, scores, rows, p_reg, cfg) -> RansacResult:
    if not np.any(status == OK):
        raise RansacError("no hypothesis")
    best = int(np.nanargmax(scores))  # first maximum: earliest iteration wins ties
    pose = Pose(R[best], t[best])
    return RansacResult(pose, float(scores[best]), int(inliers[best]), len(samples),
                        p_reg, cfg.beta, cfg.tau, best, (rows[samples], status, scores, inliers))


def _valid_rows(cs: CorrespondenceSet, observed_pixels2):
    observed = np.asarray(observed_pixels2, dtype=float).reshape(-1, 2)
    if len(observed) != len(cs):
        raise RansacError("observed pixels must align with correspondence entries")
    rows = cs.valid_indices
    return rows, cs.p3d[rows], observed[rows]


def _prepare(cs, observed_pixels2, weights, cfg: RansacConfig):
    rows, p3d, observed = _valid_rows(cs, observed_pixels2)
    if cfg.require_gate and len(rows) <= MIN_VALID_CORRESPONDENCES:
        raise RansacError("insufficient support")
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(rows),):
        raise RansacError("weights must align with valid correspondences")
    samples = np.sort(weighted_samples(w, cfg.sample_size, cfg.seed, cfg.iterations), axis=1)
    return rows, p3d, observed, samples


def run_weighted_ransac(cs: CorrespondenceSet, observed_pixels2, weights, p_reg: Pose,
                        k2: CameraIntrinsics, cfg: RansacConfig = RansacConfig()) -> RansacResult:
    """Estimate P_solver from the valid correspondences of ``cs``.

    ``observed_pixels2`` aligns with all entries of ``cs``; ``weights`` align
    with its valid entries (``cs.valid_indices``).  Trace indices refer to
    entries of ``cs``.
    """
    rows, p3d, observed, samples = _prepare(cs, observed_pixels2, weights, cfg)
    out = _evaluate(samples, p3d, observed, p_reg, k2, cfg)
    return _pick(*out, rows, p_reg, cfg)


def run_weighted_ransac_many(problems) -> list:
    """``run_weighted_ransac`` over several problems with one shared PnP batch.

    ``problems`` holds (cs, observed_pixels2, weights, p_reg, k2, cfg) tuples.
    Each slot of the returned list is the RansacResult, or the RansacError
    that the single-problem call would have raised.  The minimal solves are
    independent per hypothesis, so results equal the one-at-a-time calls.
    """
    out: list = [None] * len(problems)
    staged = []
    for i, (cs, obs, w, p_reg, k2, cfg) in enumerate(problems):
        try:
            staged.append((i, _prepare(cs, obs, w, cfg)))
        except RansacError as exc:
            out[i] = exc
    if not staged:
        return out
    by_size: dict[int, list] = {}
    for item in staged:
        by_size.setdefault(item[1][3].shape[1], []).append(item)
    for group in by_size.values():
        pts = np.concatenate([p3d[samples] for _, (_, p3d, _, samples) in group])
        pix = np.concatenate([obs[samples] for _, (_, _, obs, samples) in group])
        kk = np.concatenate([np.tile([problems[i][4].fx, problems[i][4].fy, problems[i][4].cx,
                                      problems[i][4].cy], (len(st[3]), 1)) for i, st in group])
        R, t, status = solve_pnp_batch(pts, pix, kk)
        start = 0
        for i, (rows, p3d, obs, samples) in group:
            sl = slice(start, start + len(samples))
            start = sl.stop
            _, _, _, p_reg, k2, cfg = problems[i]
            inliers, scores = _score_batch(R[sl], t[sl], status[sl], p3d, obs, p_reg, k2, cfg)
            try:
                out[i] = _pick(samples, R[sl], t[sl], status[sl], inliers, scores, rows, p_reg, cfg)
            except RansacError as exc:
                out[i] = exc
    return out


def exhaustive_ransac_oracle(cs: CorrespondenceSet, observed_pixels2, p_reg: Pose,
                             k2: CameraIntrinsics, cfg: RansacConfig = RansacConfig()) -> RansacResult:
    """Score every minimal subset of the valid correspondences (small inputs only)."""
    rows, p3d, observed = _valid_rows(cs, observed_pixels2)
    if len(rows) > ORACLE_MAX_CORRESPONDENCES:
        raise RansacError("oracle bound exceeded")
    if len(rows) < cfg.sample_size:
        raise RansacError("insufficient support")
    samples = np.array(list(combinations(range(len(rows)), cfg.sample_size)))
    out = _evaluate(samples, p3d, observed, p_reg, k2, cfg)
    return _pick(*out, rows, p_reg, cfg)

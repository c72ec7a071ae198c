"""Bringing two sessions into one frame.

Either a known transform is applied, or one is estimated with point-to-point
ICP (nearest-neighbour correspondences, closed-form SVD update).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core import PointCloud, RigidTransform, apply_transform, compose, unique_voxels
from .errors import DegenerateGeometry


def merge_maps(M_t: PointCloud, M_t1: PointCloud, T: RigidTransform) -> PointCloud:
    """``M_t`` followed by ``T`` applied to ``M_t1``; duplicates are kept."""
    return PointCloud.concat(M_t, apply_transform(M_t1, T))


@dataclass(frozen=True)
class ICPOptions:
    max_iterations: int = 50
    convergence_eps: float = 1e-4
    max_corr_dist: float = 2.0
    initial: RigidTransform | None = None
    # source keeps one point per cube of this side (0 disables)
    source_voxel: float = 0.4
    # longest extrapolated step, as a power of two of the SVD update (0 disables)
    max_extrapolation: int = 3

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.convergence_eps < 0 or self.source_voxel < 0 or self.max_extrapolation < 0:
            raise ValueError("convergence_eps, source_voxel and max_extrapolation must be non-negative")
        if not self.max_corr_dist > 0:
            raise ValueError("max_corr_dist must be positive")


@dataclass(frozen=True)
class AlignmentResult:
    """Estimated ``T`` mapping source into the target frame.

    ``residual_rmse`` is the root mean of per-point squared NN distances
    capped at ``max_corr_dist**2``; ``trace`` holds it for the initial pose and
    after every iteration, and never increases.
    """

    T: RigidTransform
    residual_rmse: float
    iterations: int
    converged: bool
    trace: tuple = field(default=(), repr=False)
    inlier_fraction: float = 0.0


def _check_spread(xyz: np.ndarray, what: str):
    if len(xyz) < 3:
        raise DegenerateGeometry(f"{what} has {len(xyz)} points; at least 3 are needed")
    s = np.linalg.svd(xyz - xyz.mean(axis=0), compute_uv=False)
    if s[0] == 0.0 or s[1] <= 1e-9 * s[0]:
        raise DegenerateGeometry(f"{what} points are collinear or coincident")


def voxel_downsample(xyz: np.ndarray, size: float) -> np.ndarray:
    """First point (in input order) of every occupied cube of side ``size``."""
    _, first, _ = unique_voxels(xyz, size)
    return xyz[np.sort(first)]


def best_fit_transform(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rotation and translation taking ``src`` onto ``dst``."""
    if len(src) < 3:
        raise DegenerateGeometry(f"only {len(src)} correspondences; at least 3 are needed")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, S, Vt = np.linalg.svd(H)
    if S[0] == 0.0 or S[1] <= 1e-12 * S[0]:
        raise DegenerateGeometry("correspondence covariance is rank deficient")
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return RigidTransform(R, mu_d - R @ mu_s)


def _same_direction(a: np.ndarray, b: np.ndarray, min_cos: float = 0.9) -> bool:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return na > 0 and nb > 0 and float(np.dot(a, b)) >= min_cos * na * nb


def _iterate(src: np.ndarray, target: np.ndarray, T: RigidTransform, max_iterations: int, eps: float,
             tau: float, max_extrapolation: int):
    """Point-to-point ICP iterations from ``T``; see :func:`estimate_transform_icp`."""
    tree = cKDTree(target)

    def evaluate(T: RigidTransform):
        moved = T.apply(src)
        d, idx = tree.query(moved, k=1, distance_upper_bound=tau, workers=-1)
        inl = np.isfinite(d)
        cost = np.where(inl, np.minimum(d, tau) ** 2, tau * tau)
        return math.sqrt(cost.mean()), moved, idx, inl

    rmse, moved, idx, inl = evaluate(T)
    centroid = src.mean(axis=0)
    trace = [rmse]
    converged = False
    prev_shift = None
    it = 0
    for it in range(1, max_iterations + 1):
        dT = best_fit_transform(moved[inl], target[idx[inl]])
        best = (compose(dT, T),) + evaluate(compose(dT, T))
        # while successive updates keep pushing the same way (sliding along
        # a weakly constrained direction) try repeating the update 2, 4, 8x
        c = T.apply(centroid)
        shift = dT.apply(c) - c
        if prev_shift is not None and _same_direction(shift, prev_shift):
            step = dT
            for _ in range(max_extrapolation):
                step = compose(step, step)
                T_try = compose(step, T)
                cand = (T_try,) + evaluate(T_try)
                if cand[1] >= best[1]:
                    break
                best = cand
        prev_shift = shift
        if best[1] > rmse:
            # only rounding can make the closed-form step worse; stay put
            trace.append(rmse)
            converged = True
            break
        T, new_rmse, moved, idx, inl = best
        trace.append(new_rmse)
        improvement = rmse - new_rmse
        rmse = new_rmse
        if improvement < eps:
            converged = True
            break
    return T, rmse, it, converged, trace, float(inl.mean())


def estimate_transform_icp(source: PointCloud, target: PointCloud,
                           opts: ICPOptions = ICPOptions()) -> AlignmentResult:
    """Estimate T with ``T * source ~ target``.

    Each iteration pairs every source point with its nearest target point,
    drops pairs farther apart than ``max_corr_dist`` and solves the rigid
    update in closed form (SVD). With ``source_voxel > 0`` the source is
    thinned to one point per cube, and a first pass runs against a target
    thinned the same way; the reported trace is that of the final pass over
    the full target.

    Raises
    ------
    DegenerateGeometry
        Fewer than 3 points, collinear input, or a rank-deficient
        correspondence set.
    """
    src = source.xyz
    _check_spread(src, "source")
    _check_spread(target.xyz, "target")
    T = opts.initial or RigidTransform.identity()
    tau = float(opts.max_corr_dist)
    used = 0
    if opts.source_voxel > 0:
        src = voxel_downsample(src, opts.source_voxel)
        coarse = voxel_downsample(target.xyz, opts.source_voxel)
        if len(coarse) >= 3 and opts.max_iterations > 1:
            T, _, used, _, _, _ = _iterate(src, coarse, T, opts.max_iterations - 1, opts.convergence_eps,
                                           tau, opts.max_extrapolation)
    T, rmse, it, converged, trace, inl = _iterate(src, target.xyz, T, max(1, opts.max_iterations - used),
                                                  opts.convergence_eps, tau, opts.max_extrapolation)
    return AlignmentResult(T=T, residual_rmse=rmse, iterations=used + it, converged=converged,
                           trace=tuple(trace), inlier_fraction=inl)

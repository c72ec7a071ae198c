"""Geometric primitives: point clouds, trajectories, SE(3) transforms and
spherical submaps.

All containers hold read-only float64 arrays so they can be shared between
threads without copying.
"""
from __future__ import annotations

import math
import os
import threading
from dataclasses import dataclass
from typing import Iterator

import numpy as np

RIGID_TOL = 1e-9
THREADS_ENV = "CLOUD_DELTA_THREADS"


def resolve_threads(threads: int | None = None) -> int:
    """Worker count: explicit value, else $CLOUD_DELTA_THREADS, else 1."""
    if threads is None:
        raw = os.environ.get(THREADS_ENV, "").strip()
        threads = int(raw) if raw else 1
    return max(1, int(threads))


def as_point(p) -> np.ndarray:
    """Return ``p`` as a finite float64 array of shape (3,)."""
    arr = np.array(p, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"a point needs 3 coordinates, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite point coordinates {arr.tolist()}")
    arr.flags.writeable = False
    return arr


def _frozen_xyz(points, what: str) -> np.ndarray:
    arr = np.array(points, dtype=np.float64, copy=True)
    if arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{what} must have shape (N, 3), got {arr.shape}")
    bad = ~np.isfinite(arr).all(axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"{what} row {i} is not finite: {arr[i].tolist()}")
    arr.flags.writeable = False
    return arr


_KEY_BIAS = 1 << 20  # packed voxel keys hold 21 bits per axis


def pack_voxel_keys(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pack (N, 3) integer voxel indices into int64.

    The second array flags rows whose indices fit (|index| < 2**20); other
    rows get meaningless packed values.
    """
    keys = np.asarray(keys, dtype=np.int64)
    ok = np.all(np.abs(keys) < _KEY_BIAS, axis=1)
    k = keys + _KEY_BIAS
    return (k[:, 0] << 42) | (k[:, 1] << 21) | k[:, 2], ok


def unpack_voxel_keys(packed: np.ndarray) -> np.ndarray:
    mask = (1 << 21) - 1
    return np.column_stack([(packed >> 42) & mask, (packed >> 21) & mask, packed & mask]) - _KEY_BIAS


def unique_voxels(xyz: np.ndarray, size: float, origin=(0.0, 0.0, 0.0)):
    """Unique voxel indices of ``xyz`` with the first member and member count of each."""
    keys = np.floor((np.asarray(xyz, dtype=np.float64) - origin) / size).astype(np.int64)
    packed, ok = pack_voxel_keys(keys)
    if not ok.all():
        raise ValueError("point extent exceeds the supported voxel index range")
    uniq, first, counts = np.unique(packed, return_index=True, return_counts=True)
    return unpack_voxel_keys(uniq), first, counts


class _HashGrid:
    # points bucketed into cubic cells of side `cell`; used for ball queries
    def __init__(self, xyz: np.ndarray, cell: float):
        self.cell = float(cell)
        keys = np.floor(xyz / self.cell).astype(np.int64)
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        sk = keys[order]
        if len(sk):
            change = np.ones(len(sk), dtype=bool)
            change[1:] = np.any(sk[1:] != sk[:-1], axis=1)
            starts = np.flatnonzero(change)
            stops = np.append(starts[1:], len(sk))
        else:
            starts = stops = np.empty(0, dtype=np.int64)
        self.order = order
        self.buckets = {
            tuple(sk[s]): (s, e) for s, e in zip(starts.tolist(), stops.tolist())
        }

    def candidates(self, center: np.ndarray, r: float) -> np.ndarray:
        lo = np.floor((center - r) / self.cell).astype(np.int64)
        hi = np.floor((center + r) / self.cell).astype(np.int64)
        chunks = []
        for i in range(lo[0], hi[0] + 1):
            for j in range(lo[1], hi[1] + 1):
                for k in range(lo[2], hi[2] + 1):
                    span = self.buckets.get((i, j, k))
                    if span is not None:
                        chunks.append(self.order[span[0]:span[1]])
        if not chunks:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(chunks)


class PointCloud:
    """An ordered, immutable set of 3D points in meters."""

    __slots__ = ("_xyz", "_grids", "_lock")

    def __init__(self, points=()):
        self._xyz = _frozen_xyz(points, "point cloud")
        self._grids: dict[float, _HashGrid] = {}
        self._lock = threading.Lock()

    @property
    def xyz(self) -> np.ndarray:
        return self._xyz

    @property
    def count(self) -> int:
        return self._xyz.shape[0]

    def __len__(self) -> int:
        return self._xyz.shape[0]

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self._xyz)

    def __repr__(self) -> str:
        return f"PointCloud(count={self.count})"

    def take(self, indices) -> "PointCloud":
        return PointCloud(self._xyz[np.asarray(indices, dtype=np.int64)])

    def mask(self, keep: np.ndarray) -> "PointCloud":
        return PointCloud(self._xyz[np.asarray(keep, dtype=bool)])

    def _grid(self, cell: float) -> _HashGrid:
        with self._lock:
            grid = self._grids.get(cell)
            if grid is None:
                grid = self._grids[cell] = _HashGrid(self._xyz, cell)
            return grid

    @staticmethod
    def concat(*clouds: "PointCloud") -> "PointCloud":
        if not clouds:
            return PointCloud()
        return PointCloud(np.concatenate([c.xyz for c in clouds], axis=0))


class Trajectory:
    """Robot positions p_1..p_K; ``k`` is 1-based and contiguous."""

    __slots__ = ("_xyz",)

    def __init__(self, poses):
        self._xyz = _frozen_xyz(poses, "trajectory")

    @property
    def xyz(self) -> np.ndarray:
        return self._xyz

    @property
    def K(self) -> int:
        return self._xyz.shape[0]

    def __len__(self) -> int:
        return self._xyz.shape[0]

    def pose(self, k: int) -> np.ndarray:
        if not 1 <= k <= self.K:
            raise IndexError(f"pose index {k} outside 1..{self.K}")
        return self._xyz[k - 1]

    @property
    def indices(self) -> np.ndarray:
        return np.arange(1, self.K + 1)

    def __repr__(self) -> str:
        return f"Trajectory(K={self.K})"


class RigidTransform:
    """An element of SE(3): ``x -> R x + p``."""

    __slots__ = ("_R", "_p")

    def __init__(self, rotation, translation=(0.0, 0.0, 0.0), tol: float = RIGID_TOL):
        R = np.array(rotation, dtype=np.float64)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        check = rigid_violation(R, tol)
        if check:
            raise ValueError(f"not a rigid transform: {check}")
        p = np.array(as_point(translation))
        R.flags.writeable = False
        p.flags.writeable = False
        self._R = R
        self._p = p

    @property
    def rotation(self) -> np.ndarray:
        return self._R

    @property
    def translation(self) -> np.ndarray:
        return self._p

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self._R
        m[:3, 3] = self._p
        return m

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3))

    @classmethod
    def from_matrix(cls, m, tol: float = RIGID_TOL) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"homogeneous matrix must be 4x4, got {m.shape}")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError(f"not a rigid transform: bottom row is {m[3].tolist()}, expected [0, 0, 0, 1]")
        return cls(m[:3, :3], m[:3, 3], tol=tol)

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(axis_angle_matrix(axis, angle), translation)

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(axis_angle_matrix((0.0, 0.0, 1.0), yaw), translation)

    def inverse(self) -> "RigidTransform":
        Rt = self._R.T
        return RigidTransform(Rt, -Rt @ self._p)

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        return xyz @ self._R.T + self._p

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def rotation_angle(self) -> float:
        """Angle of the rotation part in radians."""
        c = (np.trace(self._R) - 1.0) / 2.0
        return math.acos(min(1.0, max(-1.0, c)))

    def __repr__(self) -> str:
        return f"RigidTransform(angle={math.degrees(self.rotation_angle()):.4f} deg, p={self._p.tolist()})"


def rigid_violation(R: np.ndarray, tol: float = RIGID_TOL) -> str:
    """Name the first failed rotation check, or return '' if R is in SO(3)."""
    if not np.all(np.isfinite(R)):
        return "rotation has non-finite entries"
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err > tol:
        return f"R^T R deviates from identity by {err:.3e} (tolerance {tol:g})"
    det = np.linalg.det(R)
    if abs(det - 1.0) > tol:
        return f"det(R) = {det:.12g}, expected 1 (tolerance {tol:g})"
    return ""


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def apply_transform(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    return PointCloud(T.apply(cloud.xyz))


def compose(T1: RigidTransform, T2: RigidTransform) -> RigidTransform:
    """Return T1 * T2, i.e. apply T2 first."""
    R = T1.rotation @ T2.rotation
    # re-orthonormalise so long chains stay inside the validity tolerance
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return RigidTransform(R, T1.rotation @ T2.translation + T1.translation)


def transform_error(T_est: RigidTransform, T_ref: RigidTransform) -> tuple[float, float]:
    """Rotation error (degrees) and translation error (meters) between two transforms."""
    dR = T_est.rotation.T @ T_ref.rotation
    c = (np.trace(dR) - 1.0) / 2.0
    ang = math.degrees(math.acos(min(1.0, max(-1.0, c))))
    return ang, float(np.linalg.norm(T_est.translation - T_ref.translation))


@dataclass(frozen=True)
class SphereRegion:
    """Map points inside the closed ball of radius ``radius`` around ``center``.

    ``indices`` are positions of the sampled points in the source map, in
    ascending order, so ``points`` keeps the map's ordering.
    """

    center: np.ndarray
    radius: float
    points: PointCloud
    indices: np.ndarray

    @property
    def count(self) -> int:
        return self.points.count


def _ball_mask(xyz: np.ndarray, center: np.ndarray, r: float) -> np.ndarray:
    dx = xyz[:, 0] - center[0]
    dy = xyz[:, 1] - center[1]
    dz = xyz[:, 2] - center[2]
    return dx * dx + dy * dy + dz * dz <= r * r


def sample_sphere(cloud: PointCloud, center, r: float) -> SphereRegion:
    """Select every map point with squared distance to ``center`` at most r**2."""
    if not r > 0:
        raise ValueError(f"sphere radius must be positive, got {r}")
    c = as_point(center)
    r = float(r)
    if cloud.count == 0:
        idx = np.empty(0, dtype=np.int64)
    else:
        cand = cloud._grid(r).candidates(c, r)
        cand.sort()
        idx = cand[_ball_mask(cloud.xyz[cand], c, r)]
    idx.flags.writeable = False
    return SphereRegion(center=c, radius=r, points=cloud.take(idx), indices=idx)

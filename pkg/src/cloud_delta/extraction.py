"""Object extraction by point-to-voxel comparison.

The reference sphere is voxelized into an occupancy grid; every point of the
query sphere whose voxel is unoccupied belongs to the changed object. A
statistical outlier filter then drops isolated leftovers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .core import PointCloud, SphereRegion, as_point, pack_voxel_keys, sample_sphere, unique_voxels
from .detection import RegionPair

@dataclass(frozen=True)
class VoxelGrid:
    """Sparse occupancy grid: voxel index -> number of points inside.

    A voxel counts as occupied when it holds at least ``min_points`` points.
    """

    origin: np.ndarray
    voxel_size: float
    keys: np.ndarray
    counts: np.ndarray
    min_points: int = 1
    _occupied: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        packed, ok = pack_voxel_keys(self.keys)
        if not ok.all():
            raise ValueError("voxel grid extent exceeds the supported index range")
        occ = np.sort(packed[self.counts >= self.min_points])
        object.__setattr__(self, "_occupied", occ)

    @property
    def occupancy(self) -> dict[tuple[int, int, int], int]:
        return {tuple(k): int(c) for k, c in zip(self.keys.tolist(), self.counts.tolist())}

    @property
    def occupied_keys(self) -> np.ndarray:
        return self.keys[self.counts >= self.min_points]

    @property
    def n_occupied(self) -> int:
        return len(self._occupied)

    def index_of(self, xyz: np.ndarray) -> np.ndarray:
        return np.floor((np.asarray(xyz, dtype=np.float64) - self.origin) / self.voxel_size).astype(np.int64)

    def contains(self, xyz: np.ndarray) -> np.ndarray:
        """True for every point that falls in an occupied voxel."""
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        if len(xyz) == 0 or len(self._occupied) == 0:
            return np.zeros(len(xyz), dtype=bool)
        packed, ok = pack_voxel_keys(self.index_of(xyz))
        pos = np.searchsorted(self._occupied, packed)
        pos[pos == len(self._occupied)] = 0
        return ok & (self._occupied[pos] == packed)


def voxelize(region: SphereRegion, voxel_size: float = 0.65, min_points: int = 1) -> VoxelGrid:
    if not voxel_size > 0:
        raise ValueError(f"voxel size must be positive, got {voxel_size}")
    origin = as_point(region.center - region.radius)
    uniq, _, counts = unique_voxels(region.points.xyz, voxel_size, origin)
    return VoxelGrid(origin, float(voxel_size), uniq, counts, int(min_points))


def extract_mask(S_ref: SphereRegion, S_query: SphereRegion, voxel_size: float = 0.65,
                 min_points: int = 1) -> np.ndarray:
    grid = voxelize(S_ref, voxel_size, min_points)
    return ~grid.contains(S_query.points.xyz)


def extract_object(S_ref: SphereRegion, S_query: SphereRegion, voxel_size: float = 0.65,
                   min_points: int = 1) -> PointCloud:
    """Points of ``S_query`` lying in no occupied voxel of ``S_ref``, in order."""
    return S_query.points.mask(extract_mask(S_ref, S_query, voxel_size, min_points))


@dataclass(frozen=True)
class SORConfig:
    k_neighbors: int = 10
    lam: float = 1.0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be at least 1")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")


def mean_knn_distance(xyz: np.ndarray, k: int) -> np.ndarray:
    # column 0 is the point itself (or a duplicate at distance 0)
    d, _ = cKDTree(xyz).query(xyz, k=k + 1)
    return d[:, 1:].mean(axis=1)


def sor_mask(cloud: PointCloud, cfg: SORConfig = SORConfig()) -> np.ndarray:
    if cloud.count < cfg.k_neighbors + 1:
        return np.ones(cloud.count, dtype=bool)
    m = mean_knn_distance(cloud.xyz, cfg.k_neighbors)
    mu, sigma = m.mean(), m.std()
    return (m >= mu - cfg.lam * sigma) & (m <= mu + cfg.lam * sigma)


def filter_outliers(cloud: PointCloud, cfg: SORConfig = SORConfig()) -> PointCloud:
    """Keep points whose mean k-NN distance lies in [mu - lam*sigma, mu + lam*sigma]."""
    return cloud.mask(sor_mask(cloud, cfg))


def estimate_volume(cloud: PointCloud, resolution: float = 0.25) -> float:
    """Occupied-voxel volume of ``cloud`` in cubic meters."""
    if not resolution > 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    if cloud.count == 0:
        return 0.0
    return len(unique_voxels(cloud.xyz, resolution)[0]) * resolution ** 3


@dataclass(frozen=True)
class ExtractionParams:
    voxel_size: float = 0.65
    min_points: int = 1
    sor: SORConfig = SORConfig()
    volume_resolution: float = 0.25
    margin: float | None = None

    def __post_init__(self):
        if not self.voxel_size > 0 or not self.volume_resolution > 0:
            raise ValueError("voxel_size and volume_resolution must be positive")
        if self.min_points < 1:
            raise ValueError("min_points must be at least 1")
        if self.margin is not None and self.margin < 0:
            raise ValueError("ref_margin must be non-negative")

    @property
    def ref_margin(self) -> float:
        return self.voxel_size if self.margin is None else float(self.margin)


@dataclass(frozen=True)
class ExtractedObject:
    """One direction of change inside a region.

    ``direction`` is ``"added"`` (present later, absent before) or
    ``"removed"``. ``raw_count`` is the size before outlier filtering;
    ``sphere_count`` and ``sphere_volume`` describe the query sphere.
    """

    points: PointCloud
    source_region: RegionPair
    direction: str
    volume_estimate: float
    raw_count: int = 0
    sphere_count: int = 0
    sphere_volume: float = 0.0


class ExtractionPair(NamedTuple):
    added: ExtractedObject
    removed: ExtractedObject


def _one_direction(pair, ref_map, query_map, direction, params) -> ExtractedObject:
    c, r = pair.center_t1, pair.radius
    S_ref = sample_sphere(ref_map, c, r + params.ref_margin)
    S_query = sample_sphere(query_map, c, r)
    raw = extract_object(S_ref, S_query, params.voxel_size, params.min_points)
    obj = filter_outliers(raw, params.sor)
    return ExtractedObject(
        points=obj,
        source_region=pair,
        direction=direction,
        volume_estimate=estimate_volume(obj, params.volume_resolution),
        raw_count=raw.count,
        sphere_count=S_query.count,
        sphere_volume=estimate_volume(S_query.points, params.volume_resolution),
    )


def extract_all(pair: RegionPair, M_t: PointCloud, M_t1: PointCloud,
                params: ExtractionParams = ExtractionParams()) -> ExtractionPair:
    """Added and removed objects of one region; both maps in the common frame.

    Both spheres are centered on the later session's pose, and the reference
    sphere is grown by one voxel so query points near the rim still find
    their reference voxel.
    """
    return ExtractionPair(
        added=_one_direction(pair, M_t, M_t1, "added", params),
        removed=_one_direction(pair, M_t1, M_t, "removed", params),
    )

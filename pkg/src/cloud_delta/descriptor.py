"""Yaw-invariant place descriptors.

Each trajectory pose gets a 64-bin histogram of its spherical submap: rings of
horizontal distance from the pose times slabs of height relative to it. Rings
are unchanged by any rotation about the vertical axis through the pose, so the
descriptor is orientation-invariant while still depending on the local shape
of the place.

Descriptors from another source (e.g. a learned network) can be used instead
by loading them with :func:`cloud_delta.io.read_descriptor_set`; detection
only needs a :class:`DescriptorSet`.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .core import PointCloud, SphereRegion, Trajectory, resolve_threads, sample_sphere
from .errors import EmptyRegion

DESCRIPTOR_DIM = 64


@dataclass(frozen=True)
class DescriptorConfig:
    radius: float = 4.5
    radial_bins: int = 8
    height_bins: int = 8
    height_extent: float = 4.0

    def __post_init__(self):
        if self.radial_bins * self.height_bins != DESCRIPTOR_DIM:
            raise ValueError(
                f"radial_bins * height_bins must be {DESCRIPTOR_DIM}, "
                f"got {self.radial_bins} * {self.height_bins}"
            )
        if min(self.radial_bins, self.height_bins) < 1:
            raise ValueError("bin counts must be positive")
        if not self.radius > 0 or not self.height_extent > 0:
            raise ValueError("radius and height_extent must be positive")


class DescriptorRecord(NamedTuple):
    k: int
    q: np.ndarray

    @property
    def present(self) -> bool:
        return bool(np.any(self.q))


class DescriptorSet:
    """Descriptor vectors keyed by trajectory index.

    A record whose vector is all zeros is *absent* (its pose had an empty
    submap); present records of computed sets have unit L2 norm.
    """

    __slots__ = ("indices", "vectors", "config")

    def __init__(self, indices, vectors, config: DescriptorConfig | None = None):
        idx = np.array(indices, dtype=np.int64).reshape(-1)
        vec = np.array(vectors, dtype=np.float64)
        if vec.size == 0:
            vec = vec.reshape(0, DESCRIPTOR_DIM)
        if vec.ndim != 2 or vec.shape[1] != DESCRIPTOR_DIM:
            raise ValueError(f"descriptor vectors must have shape (K, {DESCRIPTOR_DIM}), got {vec.shape}")
        if vec.shape[0] != idx.shape[0]:
            raise ValueError(f"{idx.shape[0]} indices for {vec.shape[0]} vectors")
        if not np.all(np.isfinite(vec)):
            raise ValueError("descriptor vectors contain non-finite values")
        if len(np.unique(idx)) != len(idx):
            raise ValueError("duplicate trajectory indices in descriptor set")
        idx.flags.writeable = False
        vec.flags.writeable = False
        self.indices = idx
        self.vectors = vec
        self.config = config

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self) -> Iterator[DescriptorRecord]:
        for k, q in zip(self.indices.tolist(), self.vectors):
            yield DescriptorRecord(k, q)

    @property
    def present(self) -> np.ndarray:
        return np.any(self.vectors != 0.0, axis=1)

    def present_records(self) -> tuple[np.ndarray, np.ndarray]:
        m = self.present
        return self.indices[m], self.vectors[m]

    def permuted(self, order) -> "DescriptorSet":
        order = np.asarray(order)
        return DescriptorSet(self.indices[order], self.vectors[order], self.config)

    def __repr__(self) -> str:
        return f"DescriptorSet(K={len(self)}, present={int(self.present.sum())})"


def bin_indices(xyz: np.ndarray, center: np.ndarray, cfg: DescriptorConfig) -> np.ndarray:
    """Histogram bin (ring * height_bins + slab) of every point."""
    d = xyz - center
    rho = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1])
    ring_w = cfg.radius / cfg.radial_bins
    slab_w = 2.0 * cfg.height_extent / cfg.height_bins
    ring = np.clip(np.floor(rho / ring_w), 0, cfg.radial_bins - 1).astype(np.int64)
    # heights outside +-height_extent fall into the end slabs
    slab = np.clip(np.floor((d[:, 2] + cfg.height_extent) / slab_w), 0, cfg.height_bins - 1).astype(np.int64)
    return ring * cfg.height_bins + slab


def bin_counts(xyz: np.ndarray, center, cfg: DescriptorConfig) -> np.ndarray:
    b = bin_indices(np.asarray(xyz, dtype=np.float64), np.asarray(center, dtype=np.float64), cfg)
    return np.bincount(b, minlength=DESCRIPTOR_DIM).astype(np.float64)


def compute_descriptor(region: SphereRegion, cfg: DescriptorConfig) -> np.ndarray:
    if region.count == 0:
        raise EmptyRegion(f"no map points within {region.radius} m of {region.center.tolist()}")
    counts = bin_counts(region.points.xyz, region.center, cfg)
    return counts / np.sqrt(np.dot(counts, counts))


def compute_descriptor_set(cloud: PointCloud, traj: Trajectory, cfg: DescriptorConfig,
                           threads: int | None = None) -> DescriptorSet:
    """Descriptor for every pose of ``traj``; empty submaps give absent records."""

    def one(k: int) -> np.ndarray:
        region = sample_sphere(cloud, traj.pose(k), cfg.radius)
        if region.count == 0:
            return np.zeros(DESCRIPTOR_DIM)
        return compute_descriptor(region, cfg)

    ks = traj.indices.tolist()
    n = resolve_threads(threads)
    if n > 1 and len(ks) > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            rows = list(pool.map(one, ks))
    else:
        rows = [one(k) for k in ks]
    vectors = np.stack(rows) if rows else np.zeros((0, DESCRIPTOR_DIM))
    return DescriptorSet(ks, vectors, cfg)

"""Seeded synthetic tunnel scenes with ground-truth changes.

Randomness
----------
Every random number is derived from the raw 64-bit output of PCG64
(``numpy.random.PCG64``, the PCG XSL-RR 128/64 generator) seeded through
``numpy.random.SeedSequence(seed).spawn(4)``; one child stream each drives
tunnel shape, surface sampling, change objects and the session offset.
Uniform deviates are ``(raw >> 11) * 2**-53``; normal deviates use the
Box-Muller transform on pairs of uniforms. Both numpy components have
version-stable streams, so a seed reproduces the same scene everywhere.

Geometry
--------
The tunnel runs along +x from 0 to ``length``. The floor is flat at z = 0,
the side walls sit near y = +-width/2 and the ceiling near z = height, each
displaced by a seeded sum of sinusoids of amplitude ``roughness`` so that
every stretch of tunnel looks different. End faces close the tunnel. Only
surfaces are sampled, at uniformly random positions with one point per
``spacing**2`` of area, plus Gaussian noise.
The trajectory follows the centerline at ``sensor_height``, one pose every
``step`` meters.

The later session sees the same base surface plus its changes, expressed in
a frame offset by ``T_true``; ``T_true`` maps that frame back to the first
session's frame, which is the common frame of the ground truth.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .core import PointCloud, RigidTransform, Trajectory, apply_transform
from .errors import SceneSpecError

CHANGE_KINDS = ("add_box", "remove_box", "move_box", "add_mound")


class ScenePRNG:
    """Portable uniform and normal deviates on top of raw PCG64 output."""

    def __init__(self, seed_seq: np.random.SeedSequence):
        self._bits = np.random.PCG64(seed_seq)

    def uniform(self, lo=0.0, hi=1.0, n: int | None = None):
        size = 1 if n is None else int(n)
        raw = self._bits.random_raw(size)
        u = (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        out = lo + (hi - lo) * u
        return float(out[0]) if n is None else out

    def normal(self, sigma=1.0, n: int = 1) -> np.ndarray:
        m = (int(n) + 1) // 2
        u1 = 1.0 - self.uniform(n=m)  # (0, 1]
        u2 = self.uniform(n=m)
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([rad * np.cos(2 * np.pi * u2), rad * np.sin(2 * np.pi * u2)])
        return sigma * z[: int(n)]


@dataclass
class Change:
    kind: str
    center: tuple
    dims: tuple = (1.0, 1.0, 1.0)
    displacement: tuple = (0.0, 0.0, 0.0)
    density: float = 500.0

    def __post_init__(self):
        self.center = tuple(float(v) for v in self.center)
        self.dims = tuple(float(v) for v in self.dims)
        self.displacement = tuple(float(v) for v in self.displacement)

    @property
    def volume(self) -> float:
        dx, dy, dz = self.dims
        if self.kind == "add_mound":
            return math.pi * (dx / 2) * (dy / 2) * dz / 2.0
        return dx * dy * dz

    def locations(self) -> list[np.ndarray]:
        c = np.array(self.center)
        if self.kind == "move_box":
            return [c, c + np.array(self.displacement)]
        return [c]


@dataclass
class SceneSpec:
    seed: int = 0
    length: float = 60.0
    width: float = 5.0
    height: float = 4.0
    spacing: float = 0.135
    noise: float = 0.02
    step: float = 1.0
    sensor_height: float = 1.0
    roughness: float = 0.25
    max_yaw_deg: float = 10.0
    max_offset: float = 1.0
    affect_radius: float = 4.5
    changes: list = field(default_factory=list)

    def __post_init__(self):
        self.changes = [c if isinstance(c, Change) else Change(**c) for c in self.changes]

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SceneSpecError(f"unknown scene fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise SceneSpecError(str(e)) from e

    @classmethod
    def from_json(cls, path) -> "SceneSpec":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise SceneSpecError(f"{path}: invalid JSON: {e}") from e
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self):
        for name in ("length", "width", "height", "spacing", "step", "affect_radius"):
            if not getattr(self, name) > 0:
                raise SceneSpecError(f"{name} must be positive")
        if self.noise < 0 or self.roughness < 0:
            raise SceneSpecError("noise and roughness must be non-negative")
        if not 0 <= self.sensor_height <= self.height:
            raise SceneSpecError("sensor_height must lie between floor and ceiling")
        if self.length < 2 * self.step:
            raise SceneSpecError("tunnel is shorter than two trajectory steps")
        lo = np.array([0.0, -self.width / 2, 0.0])
        hi = np.array([self.length, self.width / 2, self.height])
        for n, ch in enumerate(self.changes):
            if ch.kind not in CHANGE_KINDS:
                raise SceneSpecError(f"change {n}: unknown kind {ch.kind!r}")
            if min(ch.dims) <= 0 or ch.density <= 0:
                raise SceneSpecError(f"change {n}: dims and density must be positive")
            half = np.array(ch.dims) / 2
            for c in ch.locations():
                if ch.kind == "add_mound":
                    box_lo = c - np.array([half[0], half[1], 0.0])
                    box_hi = c + np.array([half[0], half[1], ch.dims[2]])
                else:
                    box_lo, box_hi = c - half, c + half
                if np.any(box_lo < lo) or np.any(box_hi > hi):
                    raise SceneSpecError(
                        f"change {n} ({ch.kind}) at {c.tolist()} extends outside the tunnel "
                        f"bounds {lo.tolist()}..{hi.tolist()}"
                    )


@dataclass
class ChangeTruth:
    kind: str
    locations: list
    volume: float
    added_index: np.ndarray    # rows of M_t1
    removed_index: np.ndarray  # rows of M_t
    affected_t: list
    affected_t1: list


@dataclass
class GroundTruth:
    """Changed points in the common frame, per change and pooled."""

    changes: list
    added: np.ndarray
    removed: np.ndarray

    def to_dict(self) -> dict:
        return {
            "changes": [
                {
                    "kind": c.kind,
                    "locations": [np.asarray(p).tolist() for p in c.locations],
                    "volume": c.volume,
                    "added_points": int(len(c.added_index)),
                    "removed_points": int(len(c.removed_index)),
                    "affected_t": list(c.affected_t),
                    "affected_t1": list(c.affected_t1),
                }
                for c in self.changes
            ],
            "added_points": int(len(self.added)),
            "removed_points": int(len(self.removed)),
        }


@dataclass
class Scene:
    spec: SceneSpec
    M_t: PointCloud
    M_t1: PointCloud
    Tr_t: Trajectory
    Tr_t1: Trajectory
    truth: GroundTruth
    T_true: RigidTransform


class _Shape:
    # seeded undulation of walls and ceiling
    def __init__(self, spec: SceneSpec, rng: ScenePRNG):
        self.spec = spec
        self.terms = {}
        for surface in ("left", "right", "ceiling"):
            # three long and three short along-tunnel wavelengths, plus a
            # cross-wise one so the surface is rough in both directions
            wl = np.concatenate([rng.uniform(6.0, 15.0, 3), rng.uniform(1.0, 3.0, 3)])
            ph = rng.uniform(0.0, 2 * np.pi, 6)
            amp = rng.uniform(0.5, 1.0, 6)
            amp = amp / amp.sum()
            cross = (2 * np.pi / rng.uniform(1.5, 3.0), rng.uniform(0.0, 2 * np.pi))
            self.terms[surface] = (2 * np.pi / wl, ph, amp, cross)

    def offset(self, surface: str, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Surface displacement at along-tunnel ``x`` and cross coordinate ``v``."""
        w, ph, amp, (wc, pc) = self.terms[surface]
        a = self.spec.roughness * (0.5 if surface == "ceiling" else 1.0)
        along = (amp[None, :] * np.sin(np.outer(x, w) + ph[None, :])).sum(axis=1)
        return a * (along + 0.3 * np.sin(wc * v + pc) * np.cos(w[3] * x))


def _patch(a0, a1, b0, b1, s, rng: ScenePRNG):
    # uniform random positions, one point per s*s of parameter area
    n = max(1, int(round((a1 - a0) * (b1 - b0) / (s * s))))
    return rng.uniform(a0, a1, n), rng.uniform(b0, b1, n)


def _tunnel(spec: SceneSpec, shape: _Shape, rng: ScenePRNG) -> np.ndarray:
    L, W, H, s = spec.length, spec.width, spec.height, spec.spacing
    parts = []
    x, y = _patch(0, L, -W / 2, W / 2, s, rng)
    parts.append(np.column_stack([x, y, np.zeros_like(x)]))
    x, y = _patch(0, L, -W / 2, W / 2, s, rng)
    parts.append(np.column_stack([x, y, H + shape.offset("ceiling", x, y)]))
    x, z = _patch(0, L, 0, H, s, rng)
    parts.append(np.column_stack([x, W / 2 + shape.offset("left", x, z), z]))
    x, z = _patch(0, L, 0, H, s, rng)
    parts.append(np.column_stack([x, -W / 2 - shape.offset("right", x, z), z]))
    y, z = _patch(-W / 2, W / 2, 0, H, s, rng)
    parts.append(np.column_stack([np.zeros_like(y), y, z]))
    y, z = _patch(-W / 2, W / 2, 0, H, s, rng)
    parts.append(np.column_stack([np.full_like(y, L), y, z]))
    return np.concatenate(parts)


def _box_surface(center, dims, density, rng: ScenePRNG) -> np.ndarray:
    c = np.asarray(center, dtype=np.float64)
    d = np.asarray(dims, dtype=np.float64)
    faces = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        n = int(round(d[u] * d[v] * density))
        for sign in (-1.0, 1.0):
            pts = np.empty((n, 3))
            pts[:, axis] = c[axis] + sign * d[axis] / 2
            pts[:, u] = c[u] + rng.uniform(-d[u] / 2, d[u] / 2, n)
            pts[:, v] = c[v] + rng.uniform(-d[v] / 2, d[v] / 2, n)
            faces.append(pts)
    return np.concatenate(faces)


def _mound_surface(center, dims, density, rng: ScenePRNG) -> np.ndarray:
    # paraboloid heap z = h * (1 - (x/a)^2 - (y/b)^2) over an elliptic footprint
    a, b, h = dims[0] / 2, dims[1] / 2, dims[2]
    g = np.linspace(-1, 1, 201)
    U, V = np.meshgrid(g, g)
    inside = U * U + V * V <= 1
    slope = np.sqrt(1 + (2 * h * U / a) ** 2 + (2 * h * V / b) ** 2)
    area = (slope * inside).sum() * (2 * a / 200) * (2 * b / 200)
    n = int(round(area * density))
    rr = np.sqrt(rng.uniform(0, 1, n))
    th = rng.uniform(0, 2 * np.pi, n)
    u, v = rr * np.cos(th), rr * np.sin(th)
    z = h * (1 - u * u - v * v)
    return np.column_stack([center[0] + a * u, center[1] + b * v, center[2] + z])


def generate(spec: SceneSpec) -> Scene:
    """Build both sessions, their trajectories, T_true and the ground truth."""
    spec.validate()
    ss = np.random.SeedSequence(spec.seed).spawn(4)
    shape_rng, surf_rng, obj_rng, frame_rng = (ScenePRNG(s) for s in ss)

    shape = _Shape(spec, shape_rng)
    base = _tunnel(spec, shape, surf_rng)
    base = base + surf_rng.normal(spec.noise, base.size).reshape(base.shape)

    xs = np.arange(spec.step, spec.length - spec.step + 1e-9, spec.step)
    traj = np.column_stack([xs, np.zeros_like(xs), np.full_like(xs, spec.sensor_height)])

    only_t, only_t1 = [], []  # (change number, points)
    for n, ch in enumerate(spec.changes):
        if ch.kind == "add_mound":
            pts = _mound_surface(ch.center, ch.dims, ch.density, obj_rng)
        else:
            pts = _box_surface(ch.center, ch.dims, ch.density, obj_rng)
        pts = pts + obj_rng.normal(spec.noise, pts.size).reshape(pts.shape)
        if ch.kind in ("add_box", "add_mound"):
            only_t1.append((n, pts))
        elif ch.kind == "remove_box":
            only_t.append((n, pts))
        else:
            only_t.append((n, pts))
            only_t1.append((n, pts + np.array(ch.displacement)))

    def assemble(extra):
        chunks, owner = [base], {}
        start = len(base)
        for n, pts in extra:
            owner[n] = np.arange(start, start + len(pts))
            chunks.append(pts)
            start += len(pts)
        return np.concatenate(chunks), owner

    xyz_t, removed_of = assemble(only_t)
    xyz_t1, added_of = assemble(only_t1)

    yaw = math.radians(frame_rng.uniform(-spec.max_yaw_deg, spec.max_yaw_deg))
    zc = frame_rng.uniform(-1.0, 1.0)
    phi = frame_rng.uniform(0.0, 2 * np.pi)
    mag = spec.max_offset * frame_rng.uniform() ** (1.0 / 3.0)
    rxy = math.sqrt(max(0.0, 1.0 - zc * zc))
    T_true = RigidTransform.from_yaw(yaw, mag * np.array([rxy * math.cos(phi), rxy * math.sin(phi), zc]))
    to_t1 = T_true.inverse()

    r2 = spec.affect_radius ** 2
    changes = []
    empty = np.empty(0, dtype=np.int64)
    for n, ch in enumerate(spec.changes):
        locs = ch.locations()
        near = sorted({int(k) + 1 for c in locs for k in np.flatnonzero(((traj - c) ** 2).sum(axis=1) <= r2)})
        changes.append(ChangeTruth(ch.kind, locs, ch.volume, added_of.get(n, empty),
                                   removed_of.get(n, empty), near, near))

    added_idx = np.concatenate([c.added_index for c in changes]) if changes else empty
    removed_idx = np.concatenate([c.removed_index for c in changes]) if changes else empty
    truth = GroundTruth(changes, xyz_t1[added_idx], xyz_t[removed_idx])

    return Scene(
        spec=spec,
        M_t=PointCloud(xyz_t),
        M_t1=apply_transform(PointCloud(xyz_t1), to_t1),
        Tr_t=Trajectory(traj),
        Tr_t1=Trajectory(to_t1.apply(traj)),
        truth=truth,
        T_true=T_true,
    )


@dataclass(frozen=True)
class ScoreMetrics:
    region_recall: float
    region_precision: float
    point_recall: float
    point_precision: float


def _flatten(extracted):
    objs = []
    for e in extracted:
        if isinstance(e, tuple):
            objs.extend(e)
        else:
            objs.append(e)
    return objs


def _pool(objs, direction) -> np.ndarray:
    chunks = [o.points.xyz for o in objs if o.direction == direction and o.points.count]
    if not chunks:
        return np.empty((0, 3))
    return np.unique(np.concatenate(chunks), axis=0)


def _matched(a: np.ndarray, b: np.ndarray, dist: float) -> int:
    # rows of a having some row of b within dist
    if len(a) == 0 or len(b) == 0:
        return 0
    d, _ = cKDTree(b).query(a, k=1, distance_upper_bound=dist)
    return int(np.count_nonzero(d <= dist))


def score(truth: GroundTruth, detected, extracted, match_dist: float = 0.1,
          radius: float | None = None) -> ScoreMetrics:
    """Compare detections and extracted objects against the ground truth.

    A region is a hit when its center lies within the region radius of a
    change location. Points match when within ``match_dist`` of a point of
    the same direction (added vs removed). Empty denominators score 1.0.
    """
    locs = [c.locations for c in truth.changes]
    centers = [np.asarray(p.center_t1) for p in detected]
    radii = [radius if radius is not None else p.radius for p in detected]

    def hit(c, r, loc_list):
        return any(np.linalg.norm(c - L) <= r for L in loc_list)

    if locs:
        found = sum(any(hit(c, r, ll) for c, r in zip(centers, radii)) for ll in locs)
        region_recall = found / len(locs)
    else:
        region_recall = 1.0
    if centers:
        good = sum(any(hit(c, r, ll) for ll in locs) for c, r in zip(centers, radii))
        region_precision = good / len(centers)
    else:
        region_precision = 1.0

    objs = _flatten(extracted)
    ext_add, ext_rem = _pool(objs, "added"), _pool(objs, "removed")
    n_truth = len(truth.added) + len(truth.removed)
    n_ext = len(ext_add) + len(ext_rem)
    if n_truth:
        point_recall = (_matched(truth.added, ext_add, match_dist)
                        + _matched(truth.removed, ext_rem, match_dist)) / n_truth
    else:
        point_recall = 1.0
    if n_ext:
        point_precision = (_matched(ext_add, truth.added, match_dist)
                           + _matched(ext_rem, truth.removed, match_dist)) / n_ext
    else:
        point_precision = 1.0
    return ScoreMetrics(region_recall, region_precision, point_recall, point_precision)


def standard_scene(seed: int, min_volume: float = 0.3) -> SceneSpec:
    """60 m tunnel with three boxes added well clear of the walls."""
    rng = ScenePRNG(np.random.SeedSequence([seed, 1]))
    changes = []
    for x0 in (12.0, 30.0, 48.0):
        side = 1.0 if rng.uniform() < 0.5 else -1.0
        dims = tuple(float(v) for v in rng.uniform(0.7, 1.1, 3))
        while dims[0] * dims[1] * dims[2] < min_volume:
            dims = tuple(float(v) for v in rng.uniform(0.7, 1.1, 3))
        center = (x0 + rng.uniform(-3.0, 3.0), side * rng.uniform(0.6, 1.0), rng.uniform(1.7, 2.2))
        changes.append(Change("add_box", center, dims, density=500.0))
    return SceneSpec(seed=seed, changes=changes)


def large_scene(seed: int) -> SceneSpec:
    """240 m, 10 m wide tunnel of roughly 1.2M points with railings and muck piles."""
    rng = ScenePRNG(np.random.SeedSequence([seed, 2]))
    changes = []
    kinds = ("add_box", "add_mound", "add_box", "add_mound", "add_mound")
    for x0, kind in zip((30.0, 75.0, 120.0, 165.0, 210.0), kinds):
        side = 1.0 if rng.uniform() < 0.5 else -1.0
        x = x0 + rng.uniform(-4.0, 4.0)
        if kind == "add_box":
            changes.append(Change(kind, (x, side * 3.0, 1.5), (3.0, 0.3, 1.0), density=300.0))
        else:
            changes.append(Change(kind, (x, side * 2.0, 0.0), (3.0, 3.0, 1.2), density=300.0))
    return SceneSpec(seed=seed, length=240.0, width=10.0, height=6.0, spacing=0.081,
                     roughness=0.5, affect_radius=10.0, changes=changes)

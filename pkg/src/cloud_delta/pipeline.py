"""End-to-end run: align, detect changed regions, extract objects, report."""
from __future__ import annotations

import hashlib
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .alignment import AlignmentResult, ICPOptions, estimate_transform_icp, merge_maps
from .core import PointCloud, RigidTransform, Trajectory, apply_transform, resolve_threads
from .descriptor import DescriptorConfig, DescriptorSet, compute_descriptor_set
from .detection import (LINEAR_SCAN_THRESHOLD, ChangeScore, RegionPair, SelectOptions, build_index,
                        score_changes, select_regions)
from .extraction import ExtractionPair, ExtractionParams, SORConfig, extract_all
from .io import RegionRecord, Report


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of a run; echoed verbatim into the report metadata."""

    radius: float = 4.5
    voxel_size: float = 0.65
    min_points: int = 1
    ref_margin: float | None = None
    sor_lambda: float = 1.0
    k_neighbors: int = 10
    volume_resolution: float = 0.25
    mode: str = "threshold"
    top_k: int = 3
    lambda_d: float = 2.0
    nms_radius: float | None = None
    pairing_max: float | None = None
    min_distance: float = 0.0
    linear_threshold: int = LINEAR_SCAN_THRESHOLD
    radial_bins: int = 8
    height_bins: int = 8
    height_extent: float = 4.0
    icp_max_iterations: int = 50
    icp_convergence_eps: float = 1e-4
    icp_max_corr_dist: float = 2.0
    icp_source_voxel: float = 0.4
    threads: int | None = None

    def __post_init__(self):
        # fail early on bad values rather than halfway through a run
        self.descriptor_config()
        self.select_options()
        self.extraction_params()
        self.icp_options()
        if self.linear_threshold < 0:
            raise ValueError("linear_threshold must be non-negative")
        if self.threads is not None and self.threads < 1:
            raise ValueError("threads must be at least 1")

    def descriptor_config(self) -> DescriptorConfig:
        return DescriptorConfig(self.radius, self.radial_bins, self.height_bins, self.height_extent)

    def select_options(self) -> SelectOptions:
        return SelectOptions(mode=self.mode, k=self.top_k, lambda_d=self.lambda_d, radius=self.radius,
                             nms_radius=self.nms_radius, pairing_max=self.pairing_max,
                             min_distance=self.min_distance)

    def extraction_params(self) -> ExtractionParams:
        return ExtractionParams(voxel_size=self.voxel_size, min_points=self.min_points,
                                sor=SORConfig(self.k_neighbors, self.sor_lambda),
                                volume_resolution=self.volume_resolution, margin=self.ref_margin)

    def icp_options(self, initial: RigidTransform | None = None) -> ICPOptions:
        return ICPOptions(max_iterations=self.icp_max_iterations, convergence_eps=self.icp_convergence_eps,
                          max_corr_dist=self.icp_max_corr_dist, initial=initial,
                          source_voxel=self.icp_source_voxel)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown pipeline parameters: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PipelineResult:
    T: RigidTransform
    alignment: AlignmentResult | None
    merged_count: int
    scores: list[ChangeScore]
    regions: list[RegionPair]
    extractions: list[ExtractionPair]
    report: Report
    timings: dict = field(default_factory=dict)


def file_identity(path) -> dict:
    """Path, size and SHA-256 of an input file."""
    p = Path(path)
    h = hashlib.sha256()
    with open(p, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return {"path": str(p), "bytes": p.stat().st_size, "sha256": h.hexdigest()}


def align_maps(M_t: PointCloud, M_t1: PointCloud, cfg: PipelineConfig, T: RigidTransform | None = None):
    """Transform taking the later session into the earlier one's frame.

    ``T`` is used as given; otherwise it is estimated with ICP from identity.
    """
    if T is not None:
        return T, None
    res = estimate_transform_icp(M_t1, M_t, cfg.icp_options())
    return res.T, res


def detect(M_t: PointCloud, Tr_t: Trajectory, M_t1: PointCloud, Tr_t1: Trajectory, cfg: PipelineConfig,
           Q_t: DescriptorSet | None = None, Q_t1: DescriptorSet | None = None):
    """Score every later pose and select changed regions; inputs in the common frame."""
    dcfg = cfg.descriptor_config()
    threads = resolve_threads(cfg.threads)
    if Q_t is None:
        Q_t = compute_descriptor_set(M_t, Tr_t, dcfg, threads)
    if Q_t1 is None:
        Q_t1 = compute_descriptor_set(M_t1, Tr_t1, dcfg, threads)
    scores = score_changes(build_index(Q_t, cfg.linear_threshold), Q_t1)
    if not scores:
        return scores, []
    return scores, select_regions(scores, Tr_t, Tr_t1, cfg.select_options())


def extract_regions(regions, M_t: PointCloud, M_t1: PointCloud, cfg: PipelineConfig):
    """Extract every region, in parallel; returns (pairs, seconds) in region order."""
    params = cfg.extraction_params()

    def one(pair):
        t0 = time.perf_counter()
        out = extract_all(pair, M_t, M_t1, params)
        return out, time.perf_counter() - t0

    threads = resolve_threads(cfg.threads)
    if threads == 1 or len(regions) < 2:
        done = [one(p) for p in regions]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            done = list(pool.map(one, regions))
    return [d[0] for d in done], [d[1] for d in done]


def region_record(n: int, pair: RegionPair, ext: ExtractionPair, t_merge: float, t_cd: float,
                  t_oe: float) -> RegionRecord:
    added, removed = ext.added, ext.removed
    return RegionRecord(
        region=n,
        t_merge=t_merge,
        t_CD=t_cd,
        t_OE=t_oe,
        t_total=t_merge + t_cd + t_oe,
        V_sphere=added.sphere_volume,
        V_OE=added.volume_estimate,
        S_points=added.sphere_count,
        OE_points=added.points.count,
        j=pair.score.j,
        k_t=pair.k_t,
        distance=pair.score.distance,
        center_t=tuple(pair.center_t.tolist()),
        center_t1=tuple(pair.center_t1.tolist()),
        radius=pair.radius,
        OE_points_raw=added.raw_count,
        S_points_ref=removed.sphere_count,
        OE_points_removed=removed.points.count,
        OE_points_removed_raw=removed.raw_count,
        V_OE_removed=removed.volume_estimate,
    )


def run_pipeline(M_t: PointCloud, M_t1: PointCloud, Tr_t: Trajectory, Tr_t1: Trajectory,
                 cfg: PipelineConfig = PipelineConfig(), T: RigidTransform | None = None,
                 Q_t: DescriptorSet | None = None, Q_t1: DescriptorSet | None = None,
                 inputs: dict | None = None) -> PipelineResult:
    """Align ``M_t1`` onto ``M_t``, detect changed regions and extract objects.

    Parameters
    ----------
    M_t, M_t1 : PointCloud
        Earlier and later maps, each in its own session frame.
    Tr_t, Tr_t1 : Trajectory
        Poses in the frame of the matching map.
    T : RigidTransform, optional
        Maps the later frame into the earlier one. Estimated by ICP if omitted.
    Q_t, Q_t1 : DescriptorSet, optional
        Precomputed descriptors; computed from the maps if omitted.
    inputs : dict, optional
        Input file identities to record in the report metadata.

    Returns
    -------
    PipelineResult
        Extraction outputs and the report are in the earlier session's frame.
    """
    t0 = time.perf_counter()
    T, alignment = align_maps(M_t, M_t1, cfg, T)
    M_t1c = apply_transform(M_t1, T)
    Tr_t1c = Trajectory(T.apply(Tr_t1.xyz))
    merged = merge_maps(M_t, M_t1, T)
    t_merge = time.perf_counter() - t0

    t0 = time.perf_counter()
    scores, regions = detect(M_t, Tr_t, M_t1c, Tr_t1c, cfg, Q_t, Q_t1)
    t_cd = time.perf_counter() - t0

    extractions, t_oe = extract_regions(regions, M_t, M_t1c, cfg)
    records = [region_record(n, p, e, t_merge, t_cd, dt)
               for n, (p, e, dt) in enumerate(zip(regions, extractions, t_oe), start=1)]

    meta = {
        "parameters": cfg.to_dict(),
        "inputs": inputs or {},
        "alignment": {
            "method": "given" if alignment is None else "icp",
            "T": T.matrix.tolist(),
            "residual_rmse": None if alignment is None else alignment.residual_rmse,
            "iterations": None if alignment is None else alignment.iterations,
            "converged": None if alignment is None else alignment.converged,
        },
        "counts": {"M_t": M_t.count, "M_t1": M_t1.count, "merged": merged.count,
                   "K_t": Tr_t.K, "K_t1": Tr_t1.K, "scores": len(scores), "regions": len(regions)},
        "timings": {"t_merge": t_merge, "t_CD": t_cd, "t_OE": float(np.sum(t_oe)) if t_oe else 0.0},
    }
    return PipelineResult(T=T, alignment=alignment, merged_count=merged.count, scores=scores,
                          regions=regions, extractions=extractions, report=Report(tuple(records), meta),
                          timings=dict(meta["timings"]))

"""Change detection and object extraction between two point cloud maps.

The usual flow is :func:`~cloud_delta.pipeline.run_pipeline`: align the later
map onto the earlier one, compute a place descriptor at every pose, rank the
later poses by their nearest-neighbour descriptor distance to the earlier
session, and extract the points of each top region that fall in no occupied
voxel of the other session.
"""
from .alignment import AlignmentResult, ICPOptions, estimate_transform_icp, merge_maps
from .core import (PointCloud, RigidTransform, SphereRegion, Trajectory, apply_transform, compose,
                   sample_sphere)
from .descriptor import DescriptorConfig, DescriptorSet, compute_descriptor, compute_descriptor_set
from .detection import ChangeScore, RegionPair, SelectOptions, build_index, score_changes, select_regions
from .errors import (CloudDeltaError, DegenerateGeometry, EmptyDescriptorSet, EmptyRegion, FormatError,
                     NotRigidTransform, ReportInvariantError, SceneSpecError)
from .extraction import (ExtractedObject, ExtractionParams, SORConfig, VoxelGrid, estimate_volume,
                         extract_all, extract_object, filter_outliers, voxelize)
from .pipeline import PipelineConfig, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "AlignmentResult", "ICPOptions", "estimate_transform_icp", "merge_maps",
    "PointCloud", "RigidTransform", "SphereRegion", "Trajectory", "apply_transform", "compose", "sample_sphere",
    "DescriptorConfig", "DescriptorSet", "compute_descriptor", "compute_descriptor_set",
    "ChangeScore", "RegionPair", "SelectOptions", "build_index", "score_changes", "select_regions",
    "CloudDeltaError", "DegenerateGeometry", "EmptyDescriptorSet", "EmptyRegion", "FormatError",
    "NotRigidTransform", "ReportInvariantError", "SceneSpecError",
    "ExtractedObject", "ExtractionParams", "SORConfig", "VoxelGrid", "estimate_volume", "extract_all",
    "extract_object", "filter_outliers", "voxelize",
    "PipelineConfig", "run_pipeline",
]

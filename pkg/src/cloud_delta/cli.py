"""Command line interface.

Exit codes: 0 success, 2 usage error, 3 unreadable or malformed input,
4 numerical failure (degenerate geometry, empty descriptor sets).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

from . import io as cio
from . import synth
from .alignment import estimate_transform_icp, merge_maps
from .core import Trajectory, apply_transform, transform_error
from .descriptor import compute_descriptor_set
from .detection import build_index, score_changes, select_regions
from .errors import CloudDeltaError, FormatError, SceneSpecError
from .pipeline import (PipelineConfig, extract_regions, file_identity, region_record, run_pipeline)

log = logging.getLogger("cloud_delta")

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4

_HELP = {
    "radius": "sphere radius r in meters",
    "voxel_size": "extraction voxel size in meters",
    "min_points": "points needed for a voxel to count as occupied",
    "ref_margin": "reference sphere growth in meters (default: voxel size)",
    "sor_lambda": "outlier filter interval half-width in standard deviations",
    "k_neighbors": "neighbours in the outlier filter statistic",
    "volume_resolution": "voxel size for volume estimates",
    "mode": "region selection: threshold or top_k",
    "top_k": "regions to keep in top_k mode",
    "lambda_d": "threshold mode keeps scores >= mean + lambda_d * std",
    "nms_radius": "minimum spacing of selected regions (default: 2r)",
    "pairing_max": "max distance to the paired earlier pose (default: 2r)",
    "min_distance": "scores at or below this never become regions",
    "linear_threshold": "descriptor count below which NN search is a linear scan",
    "radial_bins": "descriptor rings",
    "height_bins": "descriptor height slabs",
    "height_extent": "descriptor height range (+-) in meters",
    "icp_max_iterations": "ICP iteration cap",
    "icp_convergence_eps": "ICP stops when the RMSE improves by less than this",
    "icp_max_corr_dist": "ICP correspondence rejection distance",
    "icp_source_voxel": "ICP source downsampling cube size (0 keeps every point)",
    "threads": "worker threads (default: $CLOUD_DELTA_THREADS or 1)",
}
_GROUPS = {
    "descriptor": ("radius", "radial_bins", "height_bins", "height_extent", "threads"),
    "detection": ("mode", "top_k", "lambda_d", "nms_radius", "pairing_max", "min_distance",
                  "linear_threshold"),
    "extraction": ("voxel_size", "min_points", "ref_margin", "sor_lambda", "k_neighbors", "volume_resolution"),
    "icp": ("icp_max_iterations", "icp_convergence_eps", "icp_max_corr_dist", "icp_source_voxel"),
}


def _add_config_flags(p: argparse.ArgumentParser, groups):
    """One kebab-case flag per PipelineConfig field in ``groups``."""
    defaults = PipelineConfig()
    wanted = {n for g in groups for n in _GROUPS[g]}
    g = p.add_argument_group("parameters")
    for f in fields(PipelineConfig):
        if f.name not in wanted:
            continue
        default = getattr(defaults, f.name)
        kind = {"int": int, "float": float, "str": str}[str(f.type).split(" ")[0]]
        kw = {"choices": ("threshold", "top_k")} if f.name == "mode" else {}
        text = _HELP[f.name] if default is None else f"{_HELP[f.name]} (default: {default})"
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=default,
                       help=text, **kw)


def _config(args) -> PipelineConfig:
    vals = {f.name: getattr(args, f.name) for f in fields(PipelineConfig) if hasattr(args, f.name)}
    try:
        return PipelineConfig(**vals)
    except ValueError as exc:
        raise _Usage(str(exc)) from None


class _Usage(Exception):
    pass


def _read_optional_transform(path):
    return cio.read_transform(path) if path else None


def _write_json(path, doc):
    cio._atomic_write(path, json.dumps(doc, indent=2) + "\n")


# ------------------------------------------------------------------ commands

def cmd_describe(args) -> int:
    cfg = _config(args)
    cloud = cio.read_point_cloud(args.map, args.map_format)
    traj = cio.read_trajectory(args.trajectory)
    dset = compute_descriptor_set(cloud, traj, cfg.descriptor_config(), cfg.threads)
    cio.write_descriptor_set(dset, args.out, args.out_format)
    log.info("%d descriptors (%d present) -> %s", len(dset), int(dset.present.sum()), args.out)
    return EXIT_OK


def cmd_align(args) -> int:
    cfg = _config(args)
    M_t = cio.read_point_cloud(args.map_t, args.map_format)
    M_t1 = cio.read_point_cloud(args.map_t1, args.map_format)
    T = _read_optional_transform(args.transform)
    t0 = time.perf_counter()
    info = {"method": "given"}
    if T is None:
        res = estimate_transform_icp(M_t1, M_t, cfg.icp_options())
        T = res.T
        info = {"method": "icp", "residual_rmse": res.residual_rmse, "iterations": res.iterations,
                "converged": res.converged}
    merged = merge_maps(M_t, M_t1, T)
    t_merge = time.perf_counter() - t0
    if args.out_merged:
        cio.write_point_cloud(merged, args.out_merged, args.out_format)
    if args.out_transform:
        cio.write_transform(T, args.out_transform)
    if args.fragment:
        _write_json(args.fragment, {"t_merge": t_merge, "alignment": info, "merged_count": merged.count,
                                    "parameters": cfg.to_dict()})
    log.info("merged %d + %d = %d points in %.3f s (%s)", M_t.count, M_t1.count, merged.count, t_merge,
             info["method"])
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = _config(args)
    Q_t = cio.read_descriptor_set(args.descriptors_t)
    Q_t1 = cio.read_descriptor_set(args.descriptors_t1)
    Tr_t = cio.read_trajectory(args.trajectory_t)
    Tr_t1 = cio.read_trajectory(args.trajectory_t1)
    T = _read_optional_transform(args.transform)
    if T is not None:
        Tr_t1 = Trajectory(T.apply(Tr_t1.xyz))
    for name, Q, Tr in (("t", Q_t, Tr_t), ("t1", Q_t1, Tr_t1)):
        if len(Q) and (Q.indices.min() < 1 or Q.indices.max() > Tr.K):
            raise FormatError(f"descriptor set {name} references poses outside 1..{Tr.K}")
    t0 = time.perf_counter()
    scores = score_changes(build_index(Q_t, cfg.linear_threshold), Q_t1)
    regions = select_regions(scores, Tr_t, Tr_t1, cfg.select_options()) if scores else []
    t_cd = time.perf_counter() - t0
    cio.write_regions(regions, args.regions)
    if args.scores:
        cio.write_scores(scores, args.scores)
    if args.fragment:
        _write_json(args.fragment, {"t_CD": t_cd, "parameters": cfg.to_dict()})
    log.info("%d scores, %d regions in %.3f s", len(scores), len(regions), t_cd)
    return EXIT_OK


def _fragments(paths) -> dict:
    out = {}
    for p in paths or ():
        try:
            out.update(json.loads(Path(p).read_text()))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{p}: line {exc.lineno}: {exc.msg}") from None
    return out


def _write_objects(out_dir: Path, extractions, fmt):
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = "xyz" if fmt == "xyz" else "ply"
    for n, pair in enumerate(extractions, start=1):
        for obj in pair:
            cio.write_point_cloud(obj.points, out_dir / f"region_{n:02d}_{obj.direction}.{ext}", fmt)


def _write_report(report, args):
    if args.table:
        cio.write_table_csv(report, args.table)
    cio.write_report(report, args.report)


def cmd_extract(args) -> int:
    cfg = _config(args)
    M_t = cio.read_point_cloud(args.map_t, args.map_format)
    M_t1 = cio.read_point_cloud(args.map_t1, args.map_format)
    regions = cio.read_regions(args.regions)
    T = _read_optional_transform(args.transform)
    frag = _fragments(args.timings)
    if T is not None:
        M_t1 = apply_transform(M_t1, T)
    extractions, t_oe = extract_regions(regions, M_t, M_t1, cfg)
    t_merge, t_cd = float(frag.get("t_merge", 0.0)), float(frag.get("t_CD", 0.0))
    records = [region_record(n, p, e, t_merge, t_cd, dt)
               for n, (p, e, dt) in enumerate(zip(regions, extractions, t_oe), start=1)]
    inputs = {"map_t": file_identity(args.map_t), "map_t1": file_identity(args.map_t1),
              "regions": file_identity(args.regions)}
    if args.transform:
        inputs["transform"] = file_identity(args.transform)
    report = cio.Report(tuple(records), {"parameters": cfg.to_dict(), "inputs": inputs})
    _write_objects(Path(args.out_dir), extractions, args.out_format)
    _write_report(report, args)
    log.info("extracted %d regions -> %s", len(regions), args.report)
    return EXIT_OK


def _synth_spec(args) -> synth.SceneSpec:
    if args.synth:
        return synth.SceneSpec.from_json(args.synth)
    if args.standard is not None:
        return synth.standard_scene(args.standard)
    return synth.large_scene(args.large)


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    out_dir = Path(args.out_dir)
    scene = None
    Q_t = Q_t1 = None
    if args.synth or args.standard is not None or args.large is not None:
        scene = synth.generate(_synth_spec(args))
        M_t, M_t1, Tr_t, Tr_t1 = scene.M_t, scene.M_t1, scene.Tr_t, scene.Tr_t1
        T = scene.T_true if args.true_transform else _read_optional_transform(args.transform)
        inputs = {"scene": scene.spec.to_dict()}
        if args.synth:
            inputs["scene_file"] = file_identity(args.synth)
    else:
        missing = [f for f in ("map_t", "map_t1", "trajectory_t", "trajectory_t1") if not getattr(args, f)]
        if missing:
            raise _Usage("raw inputs need " + ", ".join("--" + m.replace("_", "-") for m in missing))
        M_t = cio.read_point_cloud(args.map_t, args.map_format)
        M_t1 = cio.read_point_cloud(args.map_t1, args.map_format)
        Tr_t = cio.read_trajectory(args.trajectory_t)
        Tr_t1 = cio.read_trajectory(args.trajectory_t1)
        T = _read_optional_transform(args.transform)
        if args.descriptors_t:
            Q_t = cio.read_descriptor_set(args.descriptors_t)
        if args.descriptors_t1:
            Q_t1 = cio.read_descriptor_set(args.descriptors_t1)
        inputs = {k: file_identity(getattr(args, k)) for k in
                  ("map_t", "map_t1", "trajectory_t", "trajectory_t1", "transform", "descriptors_t",
                   "descriptors_t1") if getattr(args, k)}

    res = run_pipeline(M_t, M_t1, Tr_t, Tr_t1, cfg, T=T, Q_t=Q_t, Q_t1=Q_t1, inputs=inputs)
    report = res.report
    if scene is not None:
        m = synth.score(scene.truth, res.regions, res.extractions)
        rot, tr = transform_error(res.T, scene.T_true)
        report.metadata["metrics"] = {**m.__dict__, "rotation_error_deg": rot, "translation_error_m": tr}
        report.metadata["truth"] = scene.truth.to_dict()
        print(json.dumps(report.metadata["metrics"], indent=2))

    _write_objects(out_dir, res.extractions, args.out_format)
    cio.write_scores(res.scores, out_dir / "scores.csv")
    cio.write_regions(res.regions, out_dir / "regions.csv")
    cio.write_transform(res.T, out_dir / "transform.txt")
    args.report = args.report or str(out_dir / "report.json")
    _write_report(report, args)
    log.info("%d regions; report -> %s", len(res.regions), args.report)
    return EXIT_OK


def write_scene(scene: synth.Scene, out_dir: Path, fmt: str = "ply_binary_le"):
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = "xyz" if fmt == "xyz" else "ply"
    cio.write_point_cloud(scene.M_t, out_dir / f"M_t.{ext}", fmt)
    cio.write_point_cloud(scene.M_t1, out_dir / f"M_t1.{ext}", fmt)
    cio.write_trajectory(scene.Tr_t, out_dir / "Tr_t.csv")
    cio.write_trajectory(scene.Tr_t1, out_dir / "Tr_t1.csv")
    cio.write_transform(scene.T_true, out_dir / "T_true.txt")
    _write_json(out_dir / "scene.json", scene.spec.to_dict())
    _write_json(out_dir / "truth.json", scene.truth.to_dict())


def cmd_synth(args) -> int:
    scene = synth.generate(_synth_spec(args))
    write_scene(scene, Path(args.out_dir), args.out_format)
    log.info("scene with %d / %d points -> %s", scene.M_t.count, scene.M_t1.count, args.out_dir)
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cloud-delta",
        description="Change detection and object extraction between two point cloud maps.",
        epilog="exit codes: 0 success, 2 usage, 3 bad input file, 4 numerical failure")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)
    fmt_help = "point format: ply_ascii, ply_binary_le or xyz (default: from the file)"

    d = sub.add_parser("describe", help="compute place descriptors along a trajectory")
    d.add_argument("--map", required=True)
    d.add_argument("--trajectory", required=True)
    d.add_argument("--out", required=True, help="descriptor file (.csv, else binary)")
    d.add_argument("--map-format", choices=cio.POINT_FORMATS, help=fmt_help)
    d.add_argument("--out-format", choices=("csv", "binary"))
    _add_config_flags(d, ["descriptor"])
    d.set_defaults(func=cmd_describe)

    a = sub.add_parser("align", help="express the later map in the earlier map's frame and merge")
    a.add_argument("--map-t", required=True)
    a.add_argument("--map-t1", required=True)
    how = a.add_mutually_exclusive_group(required=True)
    how.add_argument("--transform", help="4x4 transform file mapping map-t1 into map-t's frame")
    how.add_argument("--icp", action="store_true", help="estimate the transform with ICP")
    a.add_argument("--out-merged")
    a.add_argument("--out-transform")
    a.add_argument("--fragment", help="JSON with t_merge for a later extract --timings")
    a.add_argument("--map-format", choices=cio.POINT_FORMATS, help=fmt_help)
    a.add_argument("--out-format", choices=cio.POINT_FORMATS, default="ply_binary_le")
    _add_config_flags(a, ["icp"])
    a.set_defaults(func=cmd_align)

    t = sub.add_parser("detect", help="score poses and select changed regions")
    t.add_argument("--descriptors-t", required=True)
    t.add_argument("--descriptors-t1", required=True)
    t.add_argument("--trajectory-t", required=True)
    t.add_argument("--trajectory-t1", required=True)
    t.add_argument("--transform", help="maps trajectory-t1 into trajectory-t's frame")
    t.add_argument("--regions", required=True, help="output regions CSV")
    t.add_argument("--scores", help="output scores CSV (j,nn_i,distance)")
    t.add_argument("--fragment", help="JSON with t_CD for a later extract --timings")
    _add_config_flags(t, ["detection"])
    t.add_argument("--radius", type=float, default=PipelineConfig.radius, help=_HELP["radius"])
    t.set_defaults(func=cmd_detect)

    e = sub.add_parser("extract", help="extract changed objects in given regions")
    e.add_argument("--map-t", required=True)
    e.add_argument("--map-t1", required=True)
    e.add_argument("--regions", required=True)
    e.add_argument("--transform", help="maps map-t1 into map-t's frame")
    e.add_argument("--timings", action="append", help="fragment JSON from align/detect (repeatable)")
    e.add_argument("--out-dir", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--table", help="also write the per-region table as CSV")
    e.add_argument("--map-format", choices=cio.POINT_FORMATS, help=fmt_help)
    e.add_argument("--out-format", choices=cio.POINT_FORMATS, default="ply_binary_le")
    _add_config_flags(e, ["extraction"])
    e.add_argument("--threads", type=int, default=None, help=_HELP["threads"])
    e.set_defaults(func=cmd_extract)

    for name, helptext in (("pipeline", "run everything from raw inputs or a synthetic scene"),
                           ("synth", "write a synthetic scene")):
        s = sub.add_parser(name, help=helptext)
        src = s.add_mutually_exclusive_group(required=(name == "synth"))
        src.add_argument("--synth", metavar="SCENE_JSON", help="scene description")
        src.add_argument("--standard", type=int, metavar="SEED", help="built-in 60 m three-box scene")
        src.add_argument("--large", type=int, metavar="SEED", help="built-in 240 m scene")
        s.add_argument("--out-dir", required=True)
        s.add_argument("--out-format", choices=cio.POINT_FORMATS, default="ply_binary_le")
        if name == "synth":
            s.set_defaults(func=cmd_synth)
            continue
        s.add_argument("--map-t")
        s.add_argument("--map-t1")
        s.add_argument("--trajectory-t")
        s.add_argument("--trajectory-t1")
        s.add_argument("--descriptors-t")
        s.add_argument("--descriptors-t1")
        how = s.add_mutually_exclusive_group()
        how.add_argument("--transform", help="4x4 transform mapping map-t1 into map-t's frame")
        how.add_argument("--icp", action="store_true", help="estimate the transform with ICP (default)")
        how.add_argument("--true-transform", action="store_true", help="synthetic scenes: use T_true")
        s.add_argument("--report", help="report path (default: OUT_DIR/report.json)")
        s.add_argument("--table", help="also write the per-region table as CSV")
        s.add_argument("--map-format", choices=cio.POINT_FORMATS, help=fmt_help)
        _add_config_flags(s, list(_GROUPS))
        s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _Usage as exc:
        parser.error(str(exc))
    except (FormatError, SceneSpecError, OSError) as exc:
        print(f"cloud-delta: error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except CloudDeltaError as exc:
        print(f"cloud-delta: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"cloud-delta: error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

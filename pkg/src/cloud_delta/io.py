"""Readers and writers for clouds, trajectories, descriptors, transforms and reports.

Every reader either returns exactly what the file declares or raises
:class:`~cloud_delta.errors.FormatError` naming the line (text formats) or
byte offset (binary formats) where parsing stopped.

Point clouds
    PLY (``ply_ascii``, ``ply_binary_le``) with vertex ``x y z`` of type
    float or double; other vertex properties and other elements are skipped.
    Plain ``xyz`` text holds one ``x y z`` triple per line, ``#`` comments
    allowed.
Trajectories
    CSV with header ``k,x,y,z``; ``k`` runs 1, 2, ... without gaps.
Descriptor sets
    CSV rows ``k,q1,...,q64`` (header optional), or binary: magic ``CDQ1``,
    little-endian u32 record count, then per record a u32 ``k`` and 64
    little-endian float32 values.
Transforms
    16 whitespace-separated reals, the 4x4 homogeneous matrix row by row.
Reports
    JSON, see :func:`write_report`.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import re
import struct
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import PointCloud, RigidTransform, Trajectory, rigid_violation
from .descriptor import DESCRIPTOR_DIM, DescriptorSet
from .detection import ChangeScore, RegionPair
from .errors import FormatError, NotRigidTransform, ReportInvariantError

log = logging.getLogger(__name__)

POINT_FORMATS = ("ply_ascii", "ply_binary_le", "xyz")


def _atomic_write(path, data: bytes | str):
    """Write ``data`` to a sibling temp file, then rename it over ``path``."""
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc
    try:
        with os.fdopen(fd, mode, newline="" if mode == "w" else None) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc


def _read_text(path) -> str:
    data = _read_bytes(path)
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: byte {exc.start}: not valid UTF-8 text") from exc


# --------------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_PLY_FORMATS = {"ascii": "ply_ascii", "binary_little_endian": "ply_binary_le",
                "binary_big_endian": "ply_binary_be"}


@dataclass
class _Element:
    name: str
    count: int
    line: int
    props: list = field(default_factory=list)  # (name, dtype) or (name, (count_dtype, item_dtype))

    @property
    def has_lists(self) -> bool:
        return any(isinstance(t, tuple) for _, t in self.props)

    def dtype(self) -> np.dtype:
        return np.dtype([(n, "<" + t) for n, t in self.props])


def _parse_ply_header(data: bytes, path):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        what = "missing 'ply' magic" if not data.startswith(b"ply") else "no 'end_header' line"
        raise FormatError(f"{path}: byte 0: malformed PLY header ({what})")
    nl = data.find(b"\n", end)
    body = nl + 1 if nl >= 0 else len(data)
    try:
        lines = data[:end].decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: byte {exc.start}: non-ASCII character in PLY header") from exc
    fmt = None
    elements: list[_Element] = []
    for lineno, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        where = f"{path}: line {lineno}"
        if tok[0] == "format":
            if len(tok) != 3 or tok[1] not in _PLY_FORMATS:
                raise FormatError(f"{where}: unsupported format line {line.strip()!r}")
            fmt = _PLY_FORMATS[tok[1]]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise FormatError(f"{where}: malformed element line {line.strip()!r}")
            elements.append(_Element(tok[1], int(tok[2]), lineno))
        elif tok[0] == "property":
            if not elements:
                raise FormatError(f"{where}: property before any element")
            if len(tok) == 5 and tok[1] == "list":
                if tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise FormatError(f"{where}: unknown list property type in {line.strip()!r}")
                elements[-1].props.append((tok[4], (_PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
            elif len(tok) == 3 and tok[1] in _PLY_TYPES:
                elements[-1].props.append((tok[2], _PLY_TYPES[tok[1]]))
            else:
                raise FormatError(f"{where}: malformed property line {line.strip()!r}")
        else:
            raise FormatError(f"{where}: unexpected header keyword {tok[0]!r}")
    if fmt is None:
        raise FormatError(f"{path}: line 2: PLY header has no format line")
    return fmt, elements, body


def _vertex_element(elements: list[_Element], path) -> _Element:
    for el in elements:
        if el.name != "vertex":
            log.warning("%s: ignoring PLY element %r (%d rows)", path, el.name, el.count)
    vx = [el for el in elements if el.name == "vertex"]
    if len(vx) != 1:
        raise FormatError(f"{path}: PLY header must declare exactly one vertex element, found {len(vx)}")
    el = vx[0]
    types = dict(el.props)
    for axis in "xyz":
        t = types.get(axis)
        if t is None:
            raise FormatError(f"{path}: line {el.line}: vertex element has no {axis!r} property")
        if t not in ("f4", "f8"):
            raise FormatError(f"{path}: line {el.line}: vertex property {axis!r} must be float or double")
    extra = [n for n, _ in el.props if n not in ("x", "y", "z")]
    if extra:
        log.warning("%s: ignoring vertex properties %s", path, ", ".join(extra))
    return el


def _skip_binary(el: _Element, data: bytes, pos: int, path) -> int:
    """Byte offset just past element ``el`` starting at ``pos``."""
    if not el.has_lists:
        size = el.count * el.dtype().itemsize
        if pos + size > len(data):
            raise FormatError(f"{path}: byte {len(data)}: truncated payload in element {el.name!r} "
                              f"declaring {el.count} rows")
        return pos + size
    for row in range(el.count):
        for _, t in el.props:
            if isinstance(t, tuple):
                cdt = np.dtype("<" + t[0])
                if pos + cdt.itemsize > len(data):
                    raise FormatError(f"{path}: byte {pos}: truncated payload in element {el.name!r} "
                                      f"row {row} of {el.count}")
                n = int(np.frombuffer(data, cdt, 1, pos)[0])
                pos += cdt.itemsize + n * np.dtype(t[1]).itemsize
            else:
                pos += np.dtype(t).itemsize
    if pos > len(data):
        raise FormatError(f"{path}: byte {len(data)}: truncated payload in element {el.name!r} "
                          f"declaring {el.count} rows")
    return pos


def _check_finite(xyz: np.ndarray, where) -> None:
    bad = ~np.isfinite(xyz).all(axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise FormatError(f"{where(i)}: non-finite coordinate {xyz[i].tolist()}")


def _read_ply_binary(data: bytes, body: int, elements, vertex: _Element, path) -> np.ndarray:
    pos = body
    for el in elements:
        if el is vertex:
            break
        pos = _skip_binary(el, data, pos, path)
    if vertex.has_lists:
        raise FormatError(f"{path}: line {vertex.line}: list properties in a binary vertex element are not supported")
    dt = vertex.dtype()
    avail = (len(data) - pos) // dt.itemsize
    if avail < vertex.count:
        raise FormatError(
            f"{path}: byte {pos + avail * dt.itemsize}: truncated payload, element 'vertex' declares "
            f"{vertex.count} rows but only {avail} are complete")
    rec = np.frombuffer(data, dt, vertex.count, pos)
    xyz = np.column_stack([rec[a].astype(np.float64) for a in "xyz"]) if vertex.count else np.empty((0, 3))
    _check_finite(xyz, lambda i: f"{path}: byte {pos + i * dt.itemsize}")
    return xyz


def _parse_rows(lines: list[str], linenos: list[int], ncols: int, path, what: str) -> np.ndarray:
    """Parse whitespace-separated numeric rows, naming the offending line on error."""
    if not lines:
        return np.empty((0, ncols))
    try:
        arr = np.loadtxt(io.StringIO("\n".join(lines)), dtype=np.float64, ndmin=2, comments=None)
        if arr.shape == (len(lines), ncols):
            return arr
    except ValueError:
        pass
    # slow path, only to locate the problem
    for n, line in zip(linenos, lines):
        tok = line.split()
        if len(tok) != ncols:
            raise FormatError(f"{path}: line {n}: {what} row has {len(tok)} values, expected {ncols}")
        for t in tok:
            try:
                float(t)
            except ValueError:
                raise FormatError(f"{path}: line {n}: {what} value {t!r} is not a number") from None
    raise FormatError(f"{path}: line {linenos[0]}: cannot parse {what} rows")


def _read_ply_ascii(data: bytes, body: int, elements, vertex: _Element, path) -> np.ndarray:
    if vertex.has_lists:
        raise FormatError(f"{path}: line {vertex.line}: list properties in the vertex element are not supported")
    try:
        text = data[body:].decode("ascii")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: byte {body + exc.start}: non-ASCII byte in PLY body") from exc
    first = data[:body].count(b"\n") + 1
    rows = [(n, l) for n, l in enumerate(text.split("\n"), start=first) if l.strip()]
    # one row per line, so rows of preceding elements can simply be skipped
    start = sum(el.count for el in elements[:elements.index(vertex)])
    chunk = rows[start:start + vertex.count]
    if len(chunk) < vertex.count:
        last = rows[-1][0] if rows else first - 1
        raise FormatError(f"{path}: line {last}: truncated payload, element 'vertex' declares "
                          f"{vertex.count} rows but only {len(chunk)} are present")
    arr = _parse_rows([l for _, l in chunk], [n for n, _ in chunk], len(vertex.props), path, "vertex")
    names = [n for n, _ in vertex.props]
    xyz = arr[:, [names.index(a) for a in "xyz"]]
    _check_finite(xyz, lambda i: f"{path}: line {chunk[i][0]}")
    return xyz


def _read_xyz(path) -> np.ndarray:
    lines, numbers = [], []
    for n, line in enumerate(_read_text(path).splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if s:
            lines.append(s)
            numbers.append(n)
    xyz = _parse_rows(lines, numbers, 3, path, "xyz")
    _check_finite(xyz, lambda i: f"{path}: line {numbers[i]}")
    return xyz


def infer_point_format(path) -> str:
    """Guess the point format from the extension (and PLY header)."""
    suffix = Path(path).suffix.lower()
    if suffix in (".xyz", ".txt"):
        return "xyz"
    if suffix == ".ply":
        with open(path, "rb") as fh:
            head = fh.read(512)
        m = re.search(rb"format\s+(\w+)", head)
        if m and m.group(1).decode() in _PLY_FORMATS:
            return _PLY_FORMATS[m.group(1).decode()]
        raise FormatError(f"{path}: byte 0: cannot find a PLY format line")
    raise FormatError(f"{path}: cannot infer point format from extension {suffix!r}")


def read_point_cloud(path, format: str | None = None) -> PointCloud:
    """Read a point cloud, preserving the file's point order.

    Parameters
    ----------
    path : str or Path
    format : {'ply_ascii', 'ply_binary_le', 'xyz'}, optional
        Declared format. Inferred from the extension and PLY header if omitted.
        For PLY the header must agree with the declared format.
    """
    fmt = format or infer_point_format(path)
    if fmt not in POINT_FORMATS:
        if format is None:
            raise FormatError(f"{path}: line 2: unsupported point format {fmt}")
        raise ValueError(f"unknown point format {fmt!r}; expected one of {', '.join(POINT_FORMATS)}")
    if fmt == "xyz":
        return PointCloud(_read_xyz(path))
    data = _read_bytes(path)
    header_fmt, elements, body = _parse_ply_header(data, path)
    if header_fmt != fmt:
        raise FormatError(f"{path}: line 2: header declares {header_fmt}, expected {fmt}")
    vertex = _vertex_element(elements, path)
    if fmt == "ply_binary_le":
        return PointCloud(_read_ply_binary(data, body, elements, vertex, path))
    return PointCloud(_read_ply_ascii(data, body, elements, vertex, path))


def write_point_cloud(cloud: PointCloud, path, format: str | None = None) -> None:
    """Write ``cloud``; binary PLY stores doubles, text formats 9 significant digits."""
    fmt = format or ("xyz" if Path(path).suffix.lower() in (".xyz", ".txt") else "ply_binary_le")
    xyz = cloud.xyz
    if fmt == "xyz":
        buf = io.StringIO()
        np.savetxt(buf, xyz, fmt="%.9g")
        _atomic_write(path, buf.getvalue())
        return
    if fmt not in ("ply_ascii", "ply_binary_le"):
        raise ValueError(f"unknown point format {fmt!r}")
    ply_fmt = "ascii" if fmt == "ply_ascii" else "binary_little_endian"
    header = (f"ply\nformat {ply_fmt} 1.0\ncomment cloud_delta\nelement vertex {len(xyz)}\n"
              "property double x\nproperty double y\nproperty double z\nend_header\n")
    if fmt == "ply_binary_le":
        _atomic_write(path, header.encode("ascii") + np.ascontiguousarray(xyz, dtype="<f8").tobytes())
    else:
        buf = io.StringIO()
        buf.write(header)
        np.savetxt(buf, xyz, fmt="%.9g")
        _atomic_write(path, buf.getvalue())


# -------------------------------------------------------------- trajectory

TRAJECTORY_HEADER = ["k", "x", "y", "z"]


def read_trajectory(path) -> Trajectory:
    rows = list(csv.reader(io.StringIO(_read_text(path))))
    if not rows or [c.strip() for c in rows[0]] != TRAJECTORY_HEADER:
        raise FormatError(f"{path}: line 1: trajectory header must be 'k,x,y,z'")
    poses = []
    seen = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise FormatError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
        try:
            k = int(row[0])
            p = [float(v) for v in row[1:]]
        except ValueError:
            raise FormatError(f"{path}: line {lineno}: cannot parse {','.join(row)!r}") from None
        if not all(math.isfinite(v) for v in p):
            raise FormatError(f"{path}: line {lineno}: non-finite pose {p}")
        if k in seen:
            raise FormatError(f"{path}: line {lineno}: duplicate k = {k}")
        if k != len(poses) + 1:
            raise FormatError(f"{path}: line {lineno}: out-of-order k = {k}, expected {len(poses) + 1}")
        seen.add(k)
        poses.append(p)
    if not poses:
        raise FormatError(f"{path}: trajectory has no poses")
    return Trajectory(poses)


def write_trajectory(traj: Trajectory, path) -> None:
    lines = [",".join(TRAJECTORY_HEADER)]
    for k, p in enumerate(traj.xyz.tolist(), start=1):
        lines.append(f"{k},{p[0]!r},{p[1]!r},{p[2]!r}")
    _atomic_write(path, "\n".join(lines) + "\n")


# ------------------------------------------------------------- descriptors

DESCRIPTOR_MAGIC = b"CDQ1"
_DESC_RECORD = np.dtype([("k", "<u4"), ("q", "<f4", (DESCRIPTOR_DIM,))])


def _descriptor_format(path, format):
    if format is not None:
        if format not in ("csv", "binary"):
            raise ValueError(f"unknown descriptor format {format!r}")
        return format
    return "csv" if Path(path).suffix.lower() == ".csv" else "binary"


def read_descriptor_set(path, format: str | None = None) -> DescriptorSet:
    """Read descriptors as CSV (``.csv``) or the ``CDQ1`` binary layout."""
    if _descriptor_format(path, format) == "binary":
        return _read_descriptor_binary(path)
    rows = list(csv.reader(io.StringIO(_read_text(path))))
    ks, qs = [], []
    for lineno, row in enumerate(rows, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if lineno == 1 and row[0].strip() == "k":
            continue
        if len(row) != DESCRIPTOR_DIM + 1:
            raise FormatError(f"{path}: line {lineno}: descriptor row has {len(row) - 1} values, "
                              f"expected {DESCRIPTOR_DIM}")
        try:
            k = int(row[0])
            q = [float(v) for v in row[1:]]
        except ValueError:
            raise FormatError(f"{path}: line {lineno}: cannot parse descriptor row") from None
        if k < 1:
            raise FormatError(f"{path}: line {lineno}: trajectory index {k} must be >= 1")
        if not all(math.isfinite(v) for v in q):
            raise FormatError(f"{path}: line {lineno}: non-finite descriptor value")
        if k in ks:
            raise FormatError(f"{path}: line {lineno}: duplicate trajectory index {k}")
        ks.append(k)
        qs.append(q)
    return DescriptorSet(ks, np.array(qs).reshape(-1, DESCRIPTOR_DIM))


def _read_descriptor_binary(path) -> DescriptorSet:
    data = _read_bytes(path)
    if data[:4] != DESCRIPTOR_MAGIC:
        raise FormatError(f"{path}: byte 0: wrong magic {data[:4]!r}, expected {DESCRIPTOR_MAGIC!r}")
    if len(data) < 8:
        raise FormatError(f"{path}: byte {len(data)}: truncated header, record count missing")
    (count,) = struct.unpack_from("<I", data, 4)
    expected = 8 + count * _DESC_RECORD.itemsize
    if len(data) != expected:
        raise FormatError(f"{path}: byte {min(len(data), expected)}: header declares {count} records "
                          f"({expected} bytes) but file has {len(data)} bytes")
    rec = np.frombuffer(data, _DESC_RECORD, count, 8)
    q = rec["q"].astype(np.float64)
    bad = ~np.isfinite(q).all(axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise FormatError(f"{path}: byte {8 + i * _DESC_RECORD.itemsize}: non-finite descriptor value")
    ks = rec["k"].astype(np.int64)
    uniq, first = np.unique(ks, return_index=True)
    if len(uniq) != count:
        dup = np.setdiff1d(np.arange(count), first)[0]
        raise FormatError(f"{path}: byte {8 + int(dup) * _DESC_RECORD.itemsize}: "
                          f"duplicate trajectory index {int(ks[dup])}")
    return DescriptorSet(ks, q)


def write_descriptor_set(dset: DescriptorSet, path, format: str | None = None) -> None:
    """Write descriptors; the binary layout stores values as float32."""
    if _descriptor_format(path, format) == "binary":
        if len(dset) and (dset.indices.min() < 0 or dset.indices.max() > 0xFFFFFFFF):
            raise ValueError("trajectory indices do not fit in u32")
        rec = np.empty(len(dset), dtype=_DESC_RECORD)
        rec["k"] = dset.indices
        rec["q"] = dset.vectors
        _atomic_write(path, DESCRIPTOR_MAGIC + struct.pack("<I", len(dset)) + rec.tobytes())
        return
    lines = ["k," + ",".join(f"q{i}" for i in range(1, DESCRIPTOR_DIM + 1))]
    for k, q in zip(dset.indices.tolist(), dset.vectors.tolist()):
        lines.append(f"{k}," + ",".join(repr(v) for v in q))
    _atomic_write(path, "\n".join(lines) + "\n")


# --------------------------------------------------------------- transform

def read_transform(path) -> RigidTransform:
    tok = _read_text(path).split()
    if len(tok) != 16:
        raise FormatError(f"{path}: expected 16 values for a 4x4 matrix, found {len(tok)}")
    try:
        m = np.array([float(t) for t in tok]).reshape(4, 4)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if not np.all(np.isfinite(m)):
        raise NotRigidTransform(f"{path}: not a rigid transform: matrix has non-finite entries")
    if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
        raise NotRigidTransform(f"{path}: not a rigid transform: bottom row is {m[3].tolist()}, expected [0, 0, 0, 1]")
    check = rigid_violation(m[:3, :3])
    if check:
        raise NotRigidTransform(f"{path}: not a rigid transform: {check}")
    return RigidTransform(m[:3, :3], m[:3, 3])


def write_transform(T: RigidTransform, path) -> None:
    rows = [" ".join(repr(float(v)) for v in row) for row in T.matrix]
    _atomic_write(path, "\n".join(rows) + "\n")


# ----------------------------------------------------------------- reports

REPORT_SCHEMA = "cloud_delta.report/1"
TABLE_COLUMNS = ("region", "t_merge", "t_CD", "t_OE", "t_total", "V_sphere", "V_OE", "S_points", "OE_points")


@dataclass(frozen=True)
class RegionRecord:
    """One row of the timing/volume report.

    Times in seconds, volumes in cubic meters. ``S_points`` and ``OE_points``
    count the query sphere and the added object after outlier filtering;
    ``*_raw`` counts are before filtering and ``*_removed`` fields describe
    the opposite direction.
    """

    region: int
    t_merge: float
    t_CD: float
    t_OE: float
    t_total: float
    V_sphere: float
    V_OE: float
    S_points: int
    OE_points: int
    j: int = 0
    k_t: int = 0
    distance: float = 0.0
    center_t: tuple = (0.0, 0.0, 0.0)
    center_t1: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.0
    OE_points_raw: int = 0
    S_points_ref: int = 0
    OE_points_removed: int = 0
    OE_points_removed_raw: int = 0
    V_OE_removed: float = 0.0

    def __post_init__(self):
        validate_record(self)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = [float(c) for c in v] if isinstance(v, (tuple, list, np.ndarray)) else v
        return out


def validate_record(rec: RegionRecord) -> None:
    for name in ("t_merge", "t_CD", "t_OE", "t_total", "V_sphere", "V_OE", "V_OE_removed", "distance", "radius"):
        v = getattr(rec, name)
        if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
            raise ReportInvariantError(f"region {rec.region}: {name} = {v!r} must be finite and non-negative")
    for name in ("S_points", "OE_points", "OE_points_raw", "S_points_ref", "OE_points_removed",
                 "OE_points_removed_raw"):
        v = getattr(rec, name)
        if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 0:
            raise ReportInvariantError(f"region {rec.region}: {name} = {v!r} must be a non-negative integer")
    if rec.t_total < rec.t_CD or rec.t_total < rec.t_OE:
        raise ReportInvariantError(
            f"region {rec.region}: t_total = {rec.t_total} is below t_CD = {rec.t_CD} or t_OE = {rec.t_OE}")
    if rec.OE_points > rec.S_points:
        raise ReportInvariantError(
            f"region {rec.region}: OE_points = {rec.OE_points} exceeds S_points = {rec.S_points}")


@dataclass(frozen=True)
class Report:
    regions: Sequence[RegionRecord] = ()
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        for r in self.regions:
            validate_record(r)
        return {"schema": REPORT_SCHEMA, "metadata": self.metadata,
                "regions": [r.to_dict() for r in self.regions]}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def report_json(report: Report) -> str:
    return json.dumps(_jsonable(report.to_dict()), indent=2, allow_nan=False) + "\n"


def write_report(report: Report, path) -> None:
    """Validate ``report`` and write it as JSON, replacing ``path`` atomically.

    Layout::

        {"schema": "cloud_delta.report/1",
         "metadata": {...run parameters and input files...},
         "regions": [{"region": 1, "t_merge": ..., ...}, ...]}

    Region keys appear in :class:`RegionRecord` field order.
    """
    _atomic_write(path, report_json(report))


def read_report(path) -> Report:
    try:
        doc = json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict) or doc.get("schema") != REPORT_SCHEMA:
        raise FormatError(f"{path}: not a {REPORT_SCHEMA} document")
    names = {f.name for f in fields(RegionRecord)}
    recs = []
    for i, r in enumerate(doc.get("regions", [])):
        unknown = set(r) - names
        if unknown:
            raise FormatError(f"{path}: region entry {i} has unknown keys {sorted(unknown)}")
        r = {k: tuple(v) if isinstance(v, list) else v for k, v in r.items()}
        try:
            recs.append(RegionRecord(**r))
        except TypeError as exc:
            raise FormatError(f"{path}: region entry {i}: {exc}") from None
    return Report(tuple(recs), doc.get("metadata", {}))


def table_csv(report: Report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for r in report.regions:
        w.writerow([getattr(r, c) for c in TABLE_COLUMNS])
    return buf.getvalue()


def write_table_csv(report: Report, path) -> None:
    """Per-region rows in the column order of the timing and volume tables."""
    _atomic_write(path, table_csv(report))


# ------------------------------------------------------- scores and regions

def write_scores(scores: Sequence[ChangeScore], path) -> None:
    lines = ["j,nn_i,distance"] + [f"{s.j},{s.nn_i},{s.distance!r}" for s in scores]
    _atomic_write(path, "\n".join(lines) + "\n")


def read_scores(path) -> list[ChangeScore]:
    rows = list(csv.reader(io.StringIO(_read_text(path))))
    if not rows or [c.strip() for c in rows[0]] != ["j", "nn_i", "distance"]:
        raise FormatError(f"{path}: line 1: scores header must be 'j,nn_i,distance'")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            j, i, d = int(row[0]), int(row[1]), float(row[2])
        except (ValueError, IndexError):
            raise FormatError(f"{path}: line {lineno}: cannot parse score row") from None
        out.append(ChangeScore(j, i, d))
    return out


REGION_COLUMNS = ("rank", "j", "nn_i", "distance", "k_t", "x_t", "y_t", "z_t", "x_t1", "y_t1", "z_t1", "radius")


def write_regions(regions: Sequence[RegionPair], path) -> None:
    lines = [",".join(REGION_COLUMNS)]
    for r in regions:
        vals = [r.rank, r.score.j, r.score.nn_i, r.score.distance, r.k_t,
                *r.center_t.tolist(), *r.center_t1.tolist(), r.radius]
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in vals))
    _atomic_write(path, "\n".join(lines) + "\n")


def read_regions(path) -> list[RegionPair]:
    rows = list(csv.reader(io.StringIO(_read_text(path))))
    if not rows or tuple(c.strip() for c in rows[0]) != REGION_COLUMNS:
        raise FormatError(f"{path}: line 1: regions header must be {','.join(REGION_COLUMNS)!r}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(REGION_COLUMNS):
            raise FormatError(f"{path}: line {lineno}: expected {len(REGION_COLUMNS)} fields, got {len(row)}")
        try:
            rank, j, nn_i, k_t = int(row[0]), int(row[1]), int(row[2]), int(row[4])
            vals = [float(v) for v in row[5:]]
            dist = float(row[3])
        except ValueError:
            raise FormatError(f"{path}: line {lineno}: cannot parse region row") from None
        if not all(math.isfinite(v) for v in vals + [dist]) or not vals[6] > 0:
            raise FormatError(f"{path}: line {lineno}: non-finite value or non-positive radius")
        out.append(RegionPair(center_t=np.array(vals[0:3]), center_t1=np.array(vals[3:6]),
                              score=ChangeScore(j, nn_i, dist), radius=vals[6], k_t=k_t, rank=rank))
    return out

import json
import logging
import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cloud_delta import io as cio
from cloud_delta.core import PointCloud, Trajectory
from cloud_delta.descriptor import DescriptorSet
from cloud_delta.detection import ChangeScore, RegionPair
from cloud_delta.errors import FormatError, NotRigidTransform, ReportInvariantError
from conftest import random_transform

PLY3 = """ply
format ascii 1.0
comment three points
element vertex 3
property float x
property float y
property float z
end_header
0 0 0
1.5 -2 3
4 5 6.25
"""


def _ply_header(n, fmt="ascii", props=("float x", "float y", "float z")):
    lines = ["ply", f"format {fmt} 1.0", f"element vertex {n}"]
    lines += [f"property {p}" for p in props]
    return "\n".join(lines + ["end_header"]) + "\n"


# --- point clouds

def test_ascii_ply_fixture(tmp_path):
    p = tmp_path / "three.ply"
    p.write_text(PLY3)
    c = cio.read_point_cloud(p, "ply_ascii")
    assert c.count == 3
    assert c.xyz.tolist() == [[0, 0, 0], [1.5, -2, 3], [4, 5, 6.25]]


def test_binary_ply_round_trip_bit_exact(tmp_path, rng):
    xyz = rng.normal(scale=50, size=(1000, 3))
    p = tmp_path / "c.ply"
    cio.write_point_cloud(PointCloud(xyz), p, "ply_binary_le")
    back = cio.read_point_cloud(p, "ply_binary_le")
    assert back.xyz.tobytes() == xyz.tobytes()


@pytest.mark.parametrize("fmt,suffix", [("ply_ascii", ".ply"), ("xyz", ".xyz")])
def test_text_round_trip_within_printed_precision(tmp_path, rng, fmt, suffix):
    xyz = rng.normal(scale=50, size=(500, 3))
    p = tmp_path / ("c" + suffix)
    cio.write_point_cloud(PointCloud(xyz), p, fmt)
    back = cio.read_point_cloud(p)
    np.testing.assert_allclose(back.xyz, xyz, rtol=1e-8, atol=0)


def test_ascii_truncation_names_count(tmp_path):
    p = tmp_path / "short.ply"
    p.write_text(_ply_header(10) + "1 2 3\n" * 9)
    with pytest.raises(FormatError, match="declares 10 rows but only 9"):
        cio.read_point_cloud(p, "ply_ascii")


def test_binary_truncation_names_byte_and_count(tmp_path):
    p = tmp_path / "short.ply"
    head = _ply_header(10, "binary_little_endian", ("double x", "double y", "double z")).encode()
    p.write_bytes(head + np.zeros((9, 3)).tobytes() + b"\0" * 5)
    with pytest.raises(FormatError, match=rf"byte {len(head) + 9 * 24}: .*declares 10 rows but only 9"):
        cio.read_point_cloud(p, "ply_binary_le")


def test_non_finite_value_reports_line(tmp_path):
    p = tmp_path / "nan.ply"
    p.write_text(_ply_header(2) + "0 0 0\n1 nan 2\n")
    with pytest.raises(FormatError, match="line 9: non-finite"):
        cio.read_point_cloud(p)


def test_bad_token_reports_line(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("# header comment\n1 2 3\n\n4 five 6\n")
    with pytest.raises(FormatError, match="line 4"):
        cio.read_point_cloud(p)


def test_malformed_header(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty int x\nproperty float y\n"
                 "property float z\nend_header\n1 2 3\n")
    with pytest.raises(FormatError, match="float or double"):
        cio.read_point_cloud(p)
    p.write_text("plx\n")
    with pytest.raises(FormatError, match="byte 0"):
        cio.read_point_cloud(p, "ply_ascii")


def test_declared_format_must_match_header(tmp_path):
    p = tmp_path / "three.ply"
    p.write_text(PLY3)
    with pytest.raises(FormatError, match="header declares ply_ascii"):
        cio.read_point_cloud(p, "ply_binary_le")


def test_extra_properties_and_elements_are_skipped(tmp_path, caplog):
    head = ("ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\nproperty uchar red\n"
            "property float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\n"
            "end_header\n").encode()
    rows = np.array([(1.0, 7, 2.0, 3.0), (4.0, 8, 5.0, 6.0)],
                    dtype=[("x", "<f4"), ("r", "u1"), ("y", "<f4"), ("z", "<f4")])
    face = struct.pack("<Biii", 3, 0, 1, 1)
    p = tmp_path / "extra.ply"
    p.write_bytes(head + rows.tobytes() + face)
    with caplog.at_level(logging.WARNING):
        c = cio.read_point_cloud(p)
    assert c.xyz.tolist() == [[1, 2, 3], [4, 5, 6]]
    assert "face" in caplog.text and "red" in caplog.text


def test_binary_element_before_vertex(tmp_path):
    head = ("ply\nformat binary_little_endian 1.0\nelement camera 1\nproperty list uchar float view\n"
            "element vertex 1\nproperty double x\nproperty double y\nproperty double z\nend_header\n").encode()
    cam = struct.pack("<Bff", 2, 1.0, 2.0)
    p = tmp_path / "cam.ply"
    p.write_bytes(head + cam + np.array([9.0, 8.0, 7.0]).tobytes())
    assert cio.read_point_cloud(p).xyz.tolist() == [[9, 8, 7]]


def test_empty_cloud_round_trip(tmp_path):
    for fmt in cio.POINT_FORMATS:
        p = tmp_path / ("e.xyz" if fmt == "xyz" else f"e_{fmt}.ply")
        cio.write_point_cloud(PointCloud(), p, fmt)
        assert cio.read_point_cloud(p, fmt).count == 0


def test_write_failure_names_path(tmp_path):
    with pytest.raises(OSError, match="missing"):
        cio.write_point_cloud(PointCloud([[0, 0, 0]]), tmp_path / "missing" / "x.ply")


@settings(max_examples=30, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(arrays(np.float64, st.tuples(st.integers(0, 30), st.just(3)),
              elements=st.floats(allow_nan=False, allow_infinity=False, width=64)))
def test_binary_ply_round_trip_property(tmp_path, xyz):
    p = tmp_path / "h.ply"
    cio.write_point_cloud(PointCloud(xyz), p, "ply_binary_le")
    assert cio.read_point_cloud(p).xyz.tobytes() == np.ascontiguousarray(xyz).tobytes()


# --- trajectories

def test_trajectory_fixture(tmp_path):
    p = tmp_path / "tr.csv"
    p.write_text("k,x,y,z\n1,0,0,0\n2,1,0,0\n")
    tr = cio.read_trajectory(p)
    assert tr.K == 2
    assert tr.xyz.tolist() == [[0, 0, 0], [1, 0, 0]]


def test_trajectory_shuffled_rows(tmp_path):
    p = tmp_path / "tr.csv"
    p.write_text("k,x,y,z\n1,0,0,0\n3,2,0,0\n2,1,0,0\n")
    with pytest.raises(FormatError, match="out-of-order k = 3"):
        cio.read_trajectory(p)


def test_trajectory_duplicate_and_gap(tmp_path):
    p = tmp_path / "tr.csv"
    p.write_text("k,x,y,z\n1,0,0,0\n1,1,0,0\n")
    with pytest.raises(FormatError, match="duplicate k = 1"):
        cio.read_trajectory(p)
    p.write_text("k,x,y,z\n2,0,0,0\n")
    with pytest.raises(FormatError, match="out-of-order k = 2"):
        cio.read_trajectory(p)
    p.write_text("x,y,z\n0,0,0\n")
    with pytest.raises(FormatError, match="header"):
        cio.read_trajectory(p)


def test_trajectory_round_trip_exact(tmp_path, rng):
    tr = Trajectory(rng.normal(scale=100, size=(500, 3)))
    p = tmp_path / "tr.csv"
    cio.write_trajectory(tr, p)
    assert cio.read_trajectory(p).xyz.tobytes() == tr.xyz.tobytes()


# --- descriptors

def _unit_rows(rng, n):
    q = rng.random((n, 64))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


@pytest.mark.parametrize("name", ["q.csv", "q.cdq"])
def test_single_descriptor_round_trip(tmp_path, name):
    q = np.zeros((1, 64))
    q[0, 0] = 1.0
    p = tmp_path / name
    cio.write_descriptor_set(DescriptorSet([1], q), p)
    back = cio.read_descriptor_set(p)
    assert back.indices.tolist() == [1]
    assert back.vectors.tolist() == q.tolist()


def test_descriptor_row_arity(tmp_path):
    p = tmp_path / "q.csv"
    p.write_text("1," + ",".join(["0.125"] * 63) + "\n")
    with pytest.raises(FormatError, match="line 1: descriptor row has 63 values, expected 64"):
        cio.read_descriptor_set(p)


def test_descriptor_csv_header_optional(tmp_path, rng):
    q = _unit_rows(rng, 3)
    p = tmp_path / "q.csv"
    cio.write_descriptor_set(DescriptorSet([1, 2, 3], q), p)
    body = p.read_text().split("\n", 1)[1]
    p.write_text(body)
    back = cio.read_descriptor_set(p)
    assert back.vectors.tobytes() == q.tobytes()


def test_descriptor_binary_round_trip_bit_identical(tmp_path, rng):
    q = _unit_rows(rng, 300).astype(np.float32)
    ks = rng.permutation(np.arange(1, 301))
    p1, p2 = tmp_path / "a.cdq", tmp_path / "b.cdq"
    cio.write_descriptor_set(DescriptorSet(ks, q), p1)
    back = cio.read_descriptor_set(p1)
    assert back.indices.tolist() == ks.tolist()
    assert back.vectors.astype(np.float32).tobytes() == q.tobytes()
    cio.write_descriptor_set(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert len(p1.read_bytes()) == 8 + 300 * (4 + 64 * 4)


def test_descriptor_binary_layout(tmp_path):
    q = np.zeros((1, 64))
    q[0, 1] = 0.5
    p = tmp_path / "q.bin"
    cio.write_descriptor_set(DescriptorSet([7], q), p)
    data = p.read_bytes()
    assert data[:4] == b"CDQ1"
    assert struct.unpack_from("<II", data, 4) == (1, 7)
    assert struct.unpack_from("<64f", data, 12)[1] == 0.5


def test_descriptor_binary_corruption(tmp_path):
    p = tmp_path / "q.cdq"
    cio.write_descriptor_set(DescriptorSet([1, 2], np.eye(64)[:2]), p)
    data = p.read_bytes()
    (tmp_path / "magic.cdq").write_bytes(b"CDQ2" + data[4:])
    with pytest.raises(FormatError, match="wrong magic"):
        cio.read_descriptor_set(tmp_path / "magic.cdq")
    (tmp_path / "short.cdq").write_bytes(data[:-4])
    with pytest.raises(FormatError, match="declares 2 records"):
        cio.read_descriptor_set(tmp_path / "short.cdq")


# --- transforms

def test_identity_transform_file(tmp_path):
    p = tmp_path / "T.txt"
    p.write_text("1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n")
    T = cio.read_transform(p)
    assert T.matrix.tolist() == np.eye(4).tolist()


def test_reflection_rejected(tmp_path):
    p = tmp_path / "T.txt"
    p.write_text("1 0 0 0\n0 1 0 0\n0 0 -1 0\n0 0 0 1\n")
    with pytest.raises(NotRigidTransform, match=r"not a rigid transform: det\(R\)"):
        cio.read_transform(p)


def test_transform_file_errors(tmp_path):
    p = tmp_path / "T.txt"
    p.write_text("1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 1 1\n")
    with pytest.raises(NotRigidTransform, match="bottom row"):
        cio.read_transform(p)
    p.write_text("1 0 0 0\n0 1 0 0\n0 0 1 0\n")
    with pytest.raises(FormatError, match="found 12"):
        cio.read_transform(p)
    p.write_text("2 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n")
    with pytest.raises(NotRigidTransform, match="R\\^T R"):
        cio.read_transform(p)


def test_transform_round_trip(tmp_path, rng):
    for _ in range(20):
        T = random_transform(rng)
        p = tmp_path / "T.txt"
        cio.write_transform(T, p)
        np.testing.assert_allclose(cio.read_transform(p).matrix, T.matrix, atol=1e-12, rtol=0)


# --- reports

def _record(**kw):
    base = dict(region=1, t_merge=1.0, t_CD=0.5, t_OE=0.25, t_total=1.75, V_sphere=206.0, V_OE=0.30,
                S_points=2470, OE_points=47)
    base.update(kw)
    return cio.RegionRecord(**base)


def test_empty_report(tmp_path):
    p = tmp_path / "r.json"
    cio.write_report(cio.Report((), {"parameters": {}}), p)
    doc = json.loads(p.read_text())
    assert doc["regions"] == []
    assert doc["schema"] == cio.REPORT_SCHEMA


def test_report_values_serialized_verbatim(tmp_path):
    p = tmp_path / "r.json"
    cio.write_report(cio.Report((_record(),), {}), p)
    doc = json.loads(p.read_text())
    r = doc["regions"][0]
    assert (r["V_sphere"], r["V_OE"], r["S_points"], r["OE_points"]) == (206, 0.30, 2470, 47)
    assert list(r)[:9] == list(cio.TABLE_COLUMNS)
    assert list(doc) == ["schema", "metadata", "regions"]
    back = cio.read_report(p)
    assert back.regions[0] == _record()


def test_report_invariants_enforced(tmp_path):
    with pytest.raises(ReportInvariantError, match="OE_points"):
        _record(OE_points=3000)
    with pytest.raises(ReportInvariantError, match="t_total"):
        _record(t_total=0.3)
    with pytest.raises(ReportInvariantError):
        _record(S_points=-1, OE_points=0)
    p = tmp_path / "r.json"
    assert not p.exists()


def test_table_csv(tmp_path):
    p = tmp_path / "t.csv"
    cio.write_table_csv(cio.Report((_record(), _record(region=2))), p)
    lines = p.read_text().splitlines()
    assert lines[0] == ",".join(cio.TABLE_COLUMNS)
    assert lines[1] == "1,1.0,0.5,0.25,1.75,206.0,0.3,2470,47"


def test_scores_and_regions_round_trip(tmp_path):
    scores = [ChangeScore(1, 4, 0.25), ChangeScore(2, 9, 0.0)]
    cio.write_scores(scores, tmp_path / "s.csv")
    assert cio.read_scores(tmp_path / "s.csv") == scores
    pair = RegionPair(np.array([1.0, 2.0, 3.0]), np.array([1.5, 2.0, 3.0]), scores[0], 4.5, k_t=3, rank=1)
    cio.write_regions([pair], tmp_path / "r.csv")
    (back,) = cio.read_regions(tmp_path / "r.csv")
    assert back.score == pair.score and back.k_t == 3 and back.rank == 1 and back.radius == 4.5
    assert back.center_t.tolist() == [1, 2, 3] and back.center_t1.tolist() == [1.5, 2, 3]

import struct

import numpy as np
import pytest

from gradsurf.errors import FormatError
from gradsurf.io import (read_cloud, read_mesh, read_normals_file, read_ply, read_xyz, write_cloud, write_mesh_ply,
                         write_obj, write_ply, write_xyz)


@pytest.fixture
def cloud_data():
    gen = np.random.default_rng(0)
    pts = gen.normal(size=(25, 3))
    nrm = gen.normal(size=(25, 3))
    return pts, nrm / np.linalg.norm(nrm, axis=1, keepdims=True)


def test_xyz_round_trip_six_decimals(tmp_path, cloud_data):
    pts, nrm = cloud_data
    write_xyz(tmp_path / "a.xyz", pts, nrm)
    c = read_xyz(tmp_path / "a.xyz")
    assert np.allclose(c.points, pts, atol=5e-7)
    assert np.allclose(c.gt_normals, nrm, atol=2e-6)
    first = (tmp_path / "a.xyz").read_text().splitlines()[0].split()
    assert all(len(tok.split(".")[1]) == 6 for tok in first)


def test_xyz_points_only(tmp_path):
    (tmp_path / "p.xyz").write_text("# header\n0 0 0\n1 2 3\n\n4 5 6\n")
    c = read_xyz(tmp_path / "p.xyz")
    assert c.gt_normals is None and c.points.shape == (3, 3)


def test_xyz_error_names_line(tmp_path):
    (tmp_path / "bad.xyz").write_text("0 0 0\n1 2 x\n")
    with pytest.raises(FormatError) as exc:
        read_xyz(tmp_path / "bad.xyz")
    assert exc.value.line == 2 and "bad.xyz" in str(exc.value) and "line 2" in str(exc.value)


def test_xyz_column_count_error(tmp_path):
    (tmp_path / "bad.xyz").write_text("0 0 0\n1 2 3 4 5 6\n")
    with pytest.raises(FormatError) as exc:
        read_xyz(tmp_path / "bad.xyz")
    assert exc.value.line == 2


def test_missing_file_message_has_path(tmp_path):
    with pytest.raises(FormatError) as exc:
        read_cloud(tmp_path / "nope.ply")
    assert "nope.ply" in str(exc.value)


@pytest.mark.parametrize("binary", [False, True])
def test_ply_round_trip(tmp_path, cloud_data, binary):
    pts, nrm = cloud_data
    write_ply(tmp_path / "a.ply", pts, nrm, binary=binary)
    c = read_ply(tmp_path / "a.ply")
    tol = 1e-6 if binary else 5e-7
    assert np.allclose(c.points, pts, atol=tol * 10)
    assert np.allclose(c.gt_normals, nrm, atol=1e-5)


def test_ply_big_endian_with_extra_property(tmp_path):
    pts = np.array([[1.5, -2.0, 3.25], [0.0, 1.0, 2.0]])
    header = ("ply\nformat binary_big_endian 1.0\ncomment test\nelement vertex 2\n"
              "property double x\nproperty double y\nproperty double z\nproperty uchar red\nend_header\n")
    body = b"".join(struct.pack(">dddB", *p, 7) for p in pts)
    (tmp_path / "be.ply").write_bytes(header.encode() + body)
    assert np.array_equal(read_ply(tmp_path / "be.ply").points, pts)


def test_ply_truncated_binary_reports_byte(tmp_path, cloud_data):
    write_ply(tmp_path / "a.ply", cloud_data[0], binary=True)
    data = (tmp_path / "a.ply").read_bytes()
    (tmp_path / "t.ply").write_bytes(data[:-5])
    with pytest.raises(FormatError) as exc:
        read_ply(tmp_path / "t.ply")
    assert exc.value.byte is not None and "byte" in str(exc.value)


def test_ply_bad_magic(tmp_path):
    (tmp_path / "x.ply").write_bytes(b"not a ply file")
    with pytest.raises(FormatError):
        read_ply(tmp_path / "x.ply")


def test_ply_ascii_bad_value_line(tmp_path):
    (tmp_path / "x.ply").write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\n"
                                    "property float y\nproperty float z\nend_header\n0 0 0\n1 q 1\n")
    with pytest.raises(FormatError) as exc:
        read_ply(tmp_path / "x.ply")
    assert exc.value.line == 9


def test_extension_dispatch(tmp_path, cloud_data):
    pts, nrm = cloud_data
    write_cloud(tmp_path / "a.ply", pts, nrm)
    write_cloud(tmp_path / "a.xyz", pts, nrm)
    assert np.allclose(read_cloud(tmp_path / "a.ply").points, read_cloud(tmp_path / "a.xyz").points, atol=1e-6)
    with pytest.raises(FormatError):
        read_cloud(tmp_path / "a.stl")


def test_normals_file(tmp_path):
    (tmp_path / "s.normals").write_text("0 0 1\n1 0 0\n")
    assert read_normals_file(tmp_path / "s.normals").shape == (2, 3)


@pytest.fixture
def tetra():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return v, f


def test_mesh_ply_round_trip(tmp_path, tetra):
    v, f = tetra
    write_mesh_ply(tmp_path / "m.ply", v, f)
    v2, f2 = read_mesh(tmp_path / "m.ply")
    assert np.allclose(v2, v) and np.array_equal(f2, f)


def test_obj_round_trip_with_normals(tmp_path, tetra):
    v, f = tetra
    write_obj(tmp_path / "m.obj", v, f, vertex_normals=v)
    v2, f2 = read_mesh(tmp_path / "m.obj")
    assert np.allclose(v2, v) and np.array_equal(f2, f)
    assert "vn " in (tmp_path / "m.obj").read_text()


def test_obj_quad_is_fan_triangulated(tmp_path):
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    _, f = read_mesh(tmp_path / "q.obj")
    assert f.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_obj_bad_record_line(tmp_path):
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 zero 0\n")
    with pytest.raises(FormatError) as exc:
        read_mesh(tmp_path / "q.obj")
    assert exc.value.line == 2

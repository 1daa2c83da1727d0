"""Readers and writers for XYZ, PLY (ascii / binary) and OBJ."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import PointCloud

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _open_bytes(path):
    path = Path(path)
    try:
        return path.read_bytes()
    except OSError as exc:
        raise FormatError(path, f"cannot read file: {exc.strerror or exc}") from exc


def read_xyz(path, name=None) -> PointCloud:
    data = _open_bytes(path)
    pts, nrm = [], []
    width = None
    for lineno, raw in enumerate(data.decode("utf-8", errors="replace").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) not in (3, 6):
            raise FormatError(path, f"expected 3 or 6 numbers, got {len(parts)}", line=lineno)
        if width is None:
            width = len(parts)
        elif len(parts) != width:
            raise FormatError(path, f"inconsistent column count {len(parts)} (expected {width})", line=lineno)
        try:
            vals = [float(v) for v in parts]
        except ValueError:
            raise FormatError(path, f"non-numeric value in {line!r}", line=lineno) from None
        pts.append(vals[:3])
        if width == 6:
            nrm.append(vals[3:])
    if not pts:
        raise FormatError(path, "no points found")
    return PointCloud(np.array(pts), np.array(nrm) if nrm else None, name or Path(path).stem)


def read_normals_file(path) -> np.ndarray:
    """PCPNet-style `.normals` file: one `nx ny nz` row per point."""
    data = _open_bytes(path).decode("utf-8", errors="replace")
    rows = []
    for lineno, line in enumerate(data.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(path, f"expected 3 numbers, got {len(parts)}", line=lineno)
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise FormatError(path, f"non-numeric value in {line!r}", line=lineno) from None
    return np.array(rows).reshape(-1, 3)


def write_xyz(path, points, normals=None):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if normals is None:
        np.savetxt(path, pts, fmt="%.6f")
    else:
        np.savetxt(path, np.hstack([pts, np.asarray(normals).reshape(-1, 3)]), fmt="%.6f")


def _parse_ply_header(path, data):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError(path, "missing 'ply' magic or 'end_header'", byte=0)
    nl = data.find(b"\n", end)
    if nl < 0:
        raise FormatError(path, "truncated header", byte=end)
    body_start = nl + 1
    fmt = None
    elements = []
    for lineno, raw in enumerate(data[:end].decode("ascii", errors="replace").splitlines(), 1):
        parts = raw.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise FormatError(path, "property before any element", line=lineno)
            if parts[1] == "list":
                if parts[2] not in _PLY_TYPES or parts[3] not in _PLY_TYPES:
                    raise FormatError(path, f"unknown list type in {raw!r}", line=lineno)
                elements[-1]["props"].append((parts[4], "list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise FormatError(path, f"unknown property type {parts[1]!r}", line=lineno)
                elements[-1]["props"].append((parts[2], "scalar", _PLY_TYPES[parts[1]], None))
        else:
            raise FormatError(path, f"unrecognized header line {raw!r}", line=lineno)
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise FormatError(path, f"unsupported PLY format {fmt!r}", line=2)
    return fmt, elements, body_start


def _read_ply_elements(path):
    data = _open_bytes(path)
    fmt, elements, pos = _parse_ply_header(path, data)
    out = {}
    if fmt == "ascii":
        text = data[pos:].decode("ascii", errors="replace").splitlines()
        header_lines = data[:pos].count(b"\n")
        cursor = 0
        for el in elements:
            rows = []
            for _ in range(el["count"]):
                while cursor < len(text) and not text[cursor].strip():
                    cursor += 1
                if cursor >= len(text):
                    raise FormatError(path, f"unexpected end of file in element {el['name']!r}",
                                      line=header_lines + cursor + 1)
                try:
                    vals = [float(v) for v in text[cursor].split()]
                except ValueError:
                    raise FormatError(path, "non-numeric value", line=header_lines + cursor + 1) from None
                rows.append(vals)
                cursor += 1
            out[el["name"]] = (el, rows)
        return out
    order = "<" if fmt == "binary_little_endian" else ">"
    for el in elements:
        if all(p[1] == "scalar" for p in el["props"]):
            dt = np.dtype([(p[0], order + p[2]) for p in el["props"]])
            nbytes = dt.itemsize * el["count"]
            if pos + nbytes > len(data):
                raise FormatError(path, f"truncated binary element {el['name']!r}", byte=pos)
            arr = np.frombuffer(data, dtype=dt, count=el["count"], offset=pos)
            pos += nbytes
            out[el["name"]] = (el, arr)
            continue
        rows = []
        for _ in range(el["count"]):
            row = []
            for name, kind, t, it in el["props"]:
                if kind == "scalar":
                    dt = np.dtype(order + t)
                    if pos + dt.itemsize > len(data):
                        raise FormatError(path, "truncated binary data", byte=pos)
                    row.append(np.frombuffer(data, dt, 1, pos)[0])
                    pos += dt.itemsize
                else:
                    ct = np.dtype(order + t)
                    if pos + ct.itemsize > len(data):
                        raise FormatError(path, "truncated binary data", byte=pos)
                    cnt = int(np.frombuffer(data, ct, 1, pos)[0])
                    pos += ct.itemsize
                    dt = np.dtype(order + it)
                    if pos + cnt * dt.itemsize > len(data):
                        raise FormatError(path, "truncated list data", byte=pos)
                    row.append(np.frombuffer(data, dt, cnt, pos).tolist())
                    pos += cnt * dt.itemsize
            rows.append(row)
        out[el["name"]] = (el, rows)
    return out


def _vertex_columns(path, el, payload):
    names = [p[0] for p in el["props"]]
    for req in ("x", "y", "z"):
        if req not in names:
            raise FormatError(path, f"vertex element lacks property {req!r}")
    if isinstance(payload, np.ndarray):
        col = lambda n: payload[n].astype(np.float64)  # noqa: E731
    else:
        arr = np.array(payload, dtype=np.float64).reshape(len(payload), -1)
        col = lambda n: arr[:, names.index(n)]  # noqa: E731
    pts = np.stack([col("x"), col("y"), col("z")], 1)
    nrm = None
    if all(n in names for n in ("nx", "ny", "nz")):
        nrm = np.stack([col("nx"), col("ny"), col("nz")], 1)
    return pts, nrm


def read_ply(path, name=None) -> PointCloud:
    els = _read_ply_elements(path)
    if "vertex" not in els:
        raise FormatError(path, "no vertex element")
    pts, nrm = _vertex_columns(path, *els["vertex"])
    if len(pts) == 0:
        raise FormatError(path, "no points found")
    return PointCloud(pts, nrm, name or Path(path).stem)


def read_cloud(path, name=None) -> PointCloud:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return read_ply(path, name)
    if suffix in (".xyz", ".txt", ".pts", ""):
        return read_xyz(path, name)
    raise FormatError(path, f"unsupported point-cloud extension {suffix!r}")


def write_ply(path, points, normals=None, binary=False):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    props = ["x", "y", "z"] + (["nx", "ny", "nz"] if normals is not None else [])
    cols = pts if normals is None else np.hstack([pts, np.asarray(normals, dtype=np.float64).reshape(-1, 3)])
    fmt = "binary_little_endian" if binary else "ascii"
    ptype = "float" if binary else "double"
    header = [ "ply", f"format {fmt} 1.0", f"element vertex {len(pts)}"]
    header += [f"property {ptype} {p}" for p in props]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(cols.astype("<f4").tobytes())
        else:
            np.savetxt(fh, cols, fmt="%.6f")


def write_cloud(path, points, normals=None):
    if Path(path).suffix.lower() == ".ply":
        write_ply(path, points, normals)
    else:
        write_xyz(path, points, normals)


def write_mesh_ply(path, vertices, faces):
    v = np.asarray(vertices, dtype="<f4").reshape(-1, 3)
    f = np.asarray(faces, dtype="<i4").reshape(-1, 3)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(v)}\nproperty float x\nproperty float y\nproperty float z\n"
        f"element face {len(f)}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    rec = np.empty(len(f), dtype=[("n", "u1"), ("i", "<i4", (3,))])
    rec["n"] = 3
    rec["i"] = f
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(v.tobytes())
        fh.write(rec.tobytes())


def write_obj(path, vertices, faces, vertex_normals=None):
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3) + 1
    with open(path, "w") as fh:
        np.savetxt(fh, v, fmt="v %.6f %.6f %.6f")
        if vertex_normals is not None:
            np.savetxt(fh, np.asarray(vertex_normals).reshape(-1, 3), fmt="vn %.6f %.6f %.6f")
            np.savetxt(fh, np.repeat(f, 2, axis=1), fmt="f %d//%d %d//%d %d//%d")
        else:
            np.savetxt(fh, f, fmt="f %d %d %d")


def read_mesh(path):
    """Return (vertices, faces) from an OBJ or PLY triangle mesh."""
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        verts, faces = [], []
        text = _open_bytes(path).decode("utf-8", errors="replace")
        for lineno, line in enumerate(text.splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                    idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                    for j in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[j], idx[j + 1]])
            except ValueError:
                raise FormatError(path, f"malformed record {line!r}", line=lineno) from None
        return np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)
    if suffix == ".ply":
        els = _read_ply_elements(path)
        if "vertex" not in els or "face" not in els:
            raise FormatError(path, "mesh PLY needs vertex and face elements")
        verts, _ = _vertex_columns(path, *els["vertex"])
        el, rows = els["face"]
        faces = []
        for row in rows:
            lst = row[0] if isinstance(row[0], list) else [int(v) for v in row[1:]]
            for j in range(1, len(lst) - 1):
                faces.append([lst[0], lst[j], lst[j + 1]])
        return verts, np.array(faces, dtype=np.int64).reshape(-1, 3)
    raise FormatError(path, f"unsupported mesh extension {suffix!r}")

"""OBJ and PLY reading/writing for ``TriMesh``.

OBJ vertex colors use the common ``v x y z r g b`` extension; the normal
texture is written as ``vn`` lines indexed like the vertices. PLY output is
binary little-endian with float normals and 8-bit colors.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .meshing import TriMesh


def save_mesh(mesh: TriMesh, path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        write_obj(mesh, path)
    elif suffix == ".ply":
        write_ply(mesh, path)
    else:
        raise ValueError(f"unsupported mesh format {suffix!r} (use .obj or .ply)")


def load_mesh(path) -> TriMesh:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return read_obj(path)
    if suffix == ".ply":
        return read_ply(path)
    raise ValueError(f"unsupported mesh format {suffix!r} (use .obj or .ply)")


def write_obj(mesh: TriMesh, path) -> None:
    lines = []
    if mesh.colors is not None:
        for p, c in zip(mesh.vertices, mesh.colors):
            lines.append("v %.9g %.9g %.9g %.6g %.6g %.6g" % (*p, *c))
    else:
        lines.extend("v %.9g %.9g %.9g" % tuple(p) for p in mesh.vertices)
    if mesh.normals is not None:
        lines.extend("vn %.9g %.9g %.9g" % tuple(n) for n in mesh.normals)
        lines.extend("f %d//%d %d//%d %d//%d" % (a, a, b, b, c, c) for a, b, c in mesh.faces + 1)
    else:
        lines.extend("f %d %d %d" % tuple(f) for f in mesh.faces + 1)
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriMesh:
    verts, colors, vns, faces, corner_normals = [], [], [], [], []
    for raw in Path(path).read_text().splitlines():
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        if tag == "v":
            nums = [float(x) for x in parts[1:]]
            verts.append(nums[:3])
            if len(nums) >= 6:
                colors.append(nums[3:6])
        elif tag == "vn":
            vns.append([float(x) for x in parts[1:4]])
        elif tag == "f":
            vi, ni = [], []
            for tok in parts[1:]:
                fields = tok.split("/")
                idx = int(fields[0])
                vi.append(idx - 1 if idx > 0 else len(verts) + idx)
                if len(fields) >= 3 and fields[2]:
                    n = int(fields[2])
                    ni.append(n - 1 if n > 0 else len(vns) + n)
            for k in range(1, len(vi) - 1):
                faces.append([vi[0], vi[k], vi[k + 1]])
            if len(ni) == len(vi):
                corner_normals.extend(zip(vi, ni))
    v = np.asarray(verts, float).reshape(-1, 3)
    normals = None
    if vns and corner_normals:
        vn = np.asarray(vns, float)
        normals = np.zeros_like(v)
        for vi, ni in corner_normals:
            normals[vi] = vn[ni]
    cols = np.asarray(colors, float) if len(colors) == len(verts) and colors else None
    return TriMesh(v, np.asarray(faces, np.int64).reshape(-1, 3), cols, normals)


def write_ply(mesh: TriMesh, path) -> None:
    props = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if mesh.normals is not None:
        props += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    if mesh.colors is not None:
        props += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    vert = np.zeros(mesh.n_vertices, dtype=props)
    for k, name in enumerate("xyz"):
        vert[name] = mesh.vertices[:, k]
    if mesh.normals is not None:
        for k, name in enumerate(("nx", "ny", "nz")):
            vert[name] = mesh.normals[:, k]
    if mesh.colors is not None:
        c8 = np.clip(np.round(mesh.colors * 255), 0, 255).astype(np.uint8)
        for k, name in enumerate(("red", "green", "blue")):
            vert[name] = c8[:, k]
    face = np.zeros(mesh.n_faces, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    face["n"] = 3
    face["idx"] = mesh.faces
    type_names = {"<f4": "float", "u1": "uchar"}
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {mesh.n_vertices}"]
    header += [f"property {type_names[t]} {n}" for n, t in props]
    header += [f"element face {mesh.n_faces}", "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(vert.tobytes())
        fh.write(face.tobytes())


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path) -> TriMesh:
    data = Path(path).read_bytes()
    end = data.index(b"end_header") + len(b"end_header")
    end = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii").splitlines()
    fmt = None
    elements = []
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            elements[-1][2].append(parts[1:])
    if fmt not in ("binary_little_endian", "ascii"):
        raise ValueError(f"{path}: unsupported PLY format {fmt}")

    body = data[end:]
    vertex = faces = None
    vertex_props = next((props for name, _, props in elements if name == "vertex"), [])
    int_props = {p[-1] for p in vertex_props if p[0] != "list" and _PLY_TYPES[p[0]][0] in "iu"}
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = []
                for p in props:
                    if p[0] == "list":
                        n = int(tokens[pos]); pos += 1
                        row.append([float(t) for t in tokens[pos:pos + n]]); pos += n
                    else:
                        row.append(float(tokens[pos])); pos += 1
                rows.append(row)
            if name == "vertex":
                vertex = {p[-1]: np.array([r[i] for r in rows]) for i, p in enumerate(props)}
            elif name == "face":
                faces = [r[0] for r in rows]
    else:
        pos = 0
        for name, count, props in elements:
            if name == "face" and len(props) == 1 and props[0][0] == "list":
                ct = np.dtype("<" + _PLY_TYPES[props[0][1]])
                it = np.dtype("<" + _PLY_TYPES[props[0][2]])
                tri_dt = np.dtype([("n", ct), ("idx", it, (3,))])
                if len(body) >= pos + count * tri_dt.itemsize:
                    arr = np.frombuffer(body, tri_dt, count, pos)
                    if np.all(arr["n"] == 3):
                        faces = arr["idx"].astype(np.int64)
                        pos += count * tri_dt.itemsize
                        continue
            if any(p[0] == "list" for p in props):
                rows = []
                for _ in range(count):
                    row = []
                    for p in props:
                        if p[0] == "list":
                            ct = np.dtype("<" + _PLY_TYPES[p[1]])
                            it = np.dtype("<" + _PLY_TYPES[p[2]])
                            n = int(np.frombuffer(body, ct, 1, pos)[0]); pos += ct.itemsize
                            row.append(np.frombuffer(body, it, n, pos).tolist()); pos += n * it.itemsize
                        else:
                            dt = np.dtype("<" + _PLY_TYPES[p[0]])
                            row.append(np.frombuffer(body, dt, 1, pos)[0]); pos += dt.itemsize
                    rows.append(row)
                if name == "face":
                    li = [i for i, p in enumerate(props) if p[0] == "list"][0]
                    faces = [r[li] for r in rows]
            else:
                dt = np.dtype([(p[1], "<" + _PLY_TYPES[p[0]]) for p in props])
                arr = np.frombuffer(body, dt, count, pos)
                pos += count * dt.itemsize
                if name == "vertex":
                    vertex = {n: arr[n].astype(float) for n in dt.names}
    if vertex is None:
        raise ValueError(f"{path}: no vertex element")
    v = np.stack([vertex["x"], vertex["y"], vertex["z"]], 1)
    if isinstance(faces, np.ndarray):
        tris = faces
    else:
        tris = []
        for poly in faces or []:
            poly = [int(i) for i in poly]
            tris.extend([poly[0], poly[k], poly[k + 1]] for k in range(1, len(poly) - 1))
    normals = colors = None
    if all(k in vertex for k in ("nx", "ny", "nz")):
        normals = np.stack([vertex["nx"], vertex["ny"], vertex["nz"]], 1)
    if all(k in vertex for k in ("red", "green", "blue")):
        colors = np.stack([vertex["red"], vertex["green"], vertex["blue"]], 1)
        if "red" in int_props:
            colors = colors / 255.0
    return TriMesh(v, np.asarray(tris, np.int64).reshape(-1, 3), colors, normals)

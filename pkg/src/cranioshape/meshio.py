"""Reading and writing meshes (OBJ, PLY) and landmark JSON files."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import MeshFormatError, ValidationError
from .mesh import TriMesh
from .scan import LandmarkSet

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def load_mesh(path) -> TriMesh:
    """Load an OBJ or PLY triangle mesh (format chosen by file suffix)."""
    path = Path(path)
    suffix = path.suffix.lower()
    try:
        if suffix == ".obj":
            return _load_obj(path)
        if suffix == ".ply":
            return _load_ply(path)
    except OSError as exc:
        raise MeshFormatError(f"{path}: {exc}") from exc
    raise MeshFormatError(f"{path}: unsupported mesh format {suffix!r}")


def save_mesh(mesh: TriMesh, path, binary: bool = True) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        _save_obj(mesh, path)
    elif suffix == ".ply":
        _save_ply(mesh, path, binary=binary)
    else:
        raise MeshFormatError(f"{path}: unsupported mesh format {suffix!r}")


# ---------------------------------------------------------------------------
# OBJ

def _load_obj(path: Path) -> TriMesh:
    verts, uvs, faces, face_uv = [], [], [], []
    non_tri = 0
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    verts.append([float(x) for x in parts[1:4]])
                    if len(verts[-1]) != 3:
                        raise ValueError("vertex needs 3 coordinates")
                elif tag == "vt":
                    uvs.append([float(x) for x in parts[1:3]])
                elif tag == "f":
                    refs = parts[1:]
                    if len(refs) != 3:
                        non_tri += 1
                        continue
                    vi, ti = [], []
                    for ref in refs:
                        fields = ref.split("/")
                        vi.append(_obj_index(fields[0], len(verts)))
                        if len(fields) > 1 and fields[1]:
                            ti.append(_obj_index(fields[1], len(uvs)))
                    faces.append(vi)
                    face_uv.append(ti if len(ti) == 3 else None)
            except (ValueError, IndexError) as exc:
                raise MeshFormatError(f"{path}:{lineno}: malformed {tag!r} record ({exc})") from None
    if non_tri:
        raise MeshFormatError(f"{path}: {non_tri} non-triangular face(s)")
    v = np.array(verts, dtype=float).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    uv = None
    if uvs and face_uv and all(t is not None for t in face_uv):
        uv_arr = np.array(uvs, dtype=float)
        uv = np.zeros((len(v), 2))
        ft = np.array(face_uv, dtype=np.int64)
        uv[f.ravel()] = uv_arr[ft.ravel()]
    return TriMesh(v, f, uv)


def _obj_index(tok: str, n: int) -> int:
    i = int(tok)
    return i - 1 if i > 0 else n + i


def _save_obj(mesh: TriMesh, path: Path) -> None:
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        if mesh.uv is not None:
            for s, t in mesh.uv.tolist():
                fh.write(f"vt {s!r} {t!r}\n")
            for a, b, c in mesh.faces + 1:
                fh.write(f"f {a}/{a} {b}/{b} {c}/{c}\n")
        else:
            for a, b, c in mesh.faces + 1:
                fh.write(f"f {a} {b} {c}\n")


# ---------------------------------------------------------------------------
# PLY

def _parse_ply_header(fh, path):
    if fh.readline().strip() != b"ply":
        raise MeshFormatError(f"{path}: missing 'ply' magic")
    fmt = None
    elements = []
    while True:
        raw = fh.readline()
        if not raw:
            raise MeshFormatError(f"{path}: unterminated header")
        parts = raw.decode("ascii", "replace").split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise MeshFormatError(f"{path}: property before element")
            if parts[1] == "list":
                elements[-1]["props"].append(("list", parts[4], _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
            else:
                elements[-1]["props"].append(("scalar", parts[2], _PLY_TYPES[parts[1]]))
        elif parts[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshFormatError(f"{path}: unsupported PLY format {fmt!r}")
    return fmt, elements


def _load_ply(path: Path) -> TriMesh:
    with open(path, "rb") as fh:
        try:
            fmt, elements = _parse_ply_header(fh, path)
        except (KeyError, IndexError, ValueError) as exc:
            raise MeshFormatError(f"{path}: bad PLY header ({exc})") from None
        body = fh.read()
    header_len = os.path.getsize(path) - len(body)
    data = {}
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for el in elements:
            rows = []
            for _ in range(el["count"]):
                row = {}
                for prop in el["props"]:
                    try:
                        if prop[0] == "list":
                            n = int(tokens[pos])
                            row[prop[1]] = [float(t) for t in tokens[pos + 1:pos + 1 + n]]
                            if len(row[prop[1]]) != n:
                                raise IndexError
                            pos += 1 + n
                        else:
                            row[prop[1]] = float(tokens[pos])
                            pos += 1
                    except (IndexError, ValueError):
                        raise MeshFormatError(f"{path}: truncated/malformed {el['name']} data "
                                              f"at token {pos}") from None
                rows.append(row)
            data[el["name"]] = rows
        verts = data.get("vertex", [])
        v = np.array([[r["x"], r["y"], r["z"]] for r in verts], dtype=float).reshape(-1, 3)
        uv = _ply_uv(verts)
        faces = data.get("face", [])
        key = _face_key(elements)
        lens = [len(r[key]) for r in faces]
        _check_tri(lens, path)
        f = np.array([r[key] for r in faces], dtype=np.int64).reshape(-1, 3)
        return TriMesh(v, f, uv)

    offset = 0
    for el in elements:
        if all(p[0] == "scalar" for p in el["props"]):
            dt = np.dtype([(p[1], "<" + p[2]) for p in el["props"]])
            need = dt.itemsize * el["count"]
            if offset + need > len(body):
                raise MeshFormatError(f"{path}: truncated {el['name']} block at byte {header_len + offset}")
            data[el["name"]] = np.frombuffer(body, dtype=dt, count=el["count"], offset=offset)
            offset += need
        elif len(el["props"]) == 1 and _try_fixed_tri(body, offset, el, data):
            prop = el["props"][0]
            offset += el["count"] * (np.dtype(prop[2]).itemsize + 3 * np.dtype(prop[3]).itemsize)
        else:
            rows = []
            for _ in range(el["count"]):
                row = {}
                for prop in el["props"]:
                    if prop[0] == "list":
                        ct, it = np.dtype("<" + prop[2]), np.dtype("<" + prop[3])
                        if offset + ct.itemsize > len(body):
                            raise MeshFormatError(f"{path}: truncated at byte {header_len + offset}")
                        n = int(np.frombuffer(body, ct, 1, offset)[0])
                        offset += ct.itemsize
                        if offset + n * it.itemsize > len(body):
                            raise MeshFormatError(f"{path}: truncated at byte {header_len + offset}")
                        row[prop[1]] = np.frombuffer(body, it, n, offset)
                        offset += n * it.itemsize
                    else:
                        st = np.dtype("<" + prop[2])
                        row[prop[1]] = np.frombuffer(body, st, 1, offset)[0]
                        offset += st.itemsize
                rows.append(row)
            data[el["name"]] = rows
    vert = data.get("vertex")
    if vert is None:
        raise MeshFormatError(f"{path}: no vertex element")
    v = np.stack([vert["x"], vert["y"], vert["z"]], axis=1).astype(float)
    names = vert.dtype.names
    uv = None
    for a, b in (("s", "t"), ("u", "v"), ("texture_u", "texture_v")):
        if a in names and b in names:
            uv = np.stack([vert[a], vert[b]], axis=1).astype(float)
            break
    faces = data.get("face", [])
    key = _face_key(elements)
    lens = [len(r[key]) for r in faces]
    _check_tri(lens, path)
    f = np.array([r[key] for r in faces], dtype=np.int64).reshape(-1, 3)
    return TriMesh(v, f, uv)


def _try_fixed_tri(body, offset, el, data) -> bool:
    """Read an all-triangle list element as fixed-size records if possible."""
    _, name, ct, it = el["props"][0]
    dt = np.dtype([("n", "<" + ct), ("i", "<" + it, 3)])
    if offset + dt.itemsize * el["count"] > len(body):
        return False
    rec = np.frombuffer(body, dtype=dt, count=el["count"], offset=offset)
    if not np.all(rec["n"] == 3):
        return False
    data[el["name"]] = [{name: row} for row in rec["i"]]
    return True


def _ply_uv(rows):
    if not rows:
        return None
    for a, b in (("s", "t"), ("u", "v"), ("texture_u", "texture_v")):
        if a in rows[0] and b in rows[0]:
            return np.array([[r[a], r[b]] for r in rows], dtype=float)
    return None


def _face_key(elements):
    for el in elements:
        if el["name"] == "face":
            for prop in el["props"]:
                if prop[0] == "list":
                    return prop[1]
    return "vertex_indices"


def _check_tri(lens, path):
    bad = sum(1 for n in lens if n != 3)
    if bad:
        raise MeshFormatError(f"{path}: {bad} non-triangular face(s)")


def _save_ply(mesh: TriMesh, path: Path, binary: bool = True) -> None:
    has_uv = mesh.uv is not None
    header = ["ply", "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {mesh.n_vertices}",
              "property double x", "property double y", "property double z"]
    if has_uv:
        header += ["property double s", "property double t"]
    header += [f"element face {mesh.n_faces}", "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            cols = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
            if has_uv:
                cols += [("s", "<f8"), ("t", "<f8")]
            vrec = np.empty(mesh.n_vertices, dtype=cols)
            vrec["x"], vrec["y"], vrec["z"] = mesh.vertices.T
            if has_uv:
                vrec["s"], vrec["t"] = mesh.uv.T
            fh.write(vrec.tobytes())
            frec = np.empty(mesh.n_faces, dtype=[("n", "u1"), ("i", "<i4", 3)])
            frec["n"] = 3
            frec["i"] = mesh.faces
            fh.write(frec.tobytes())
        else:
            lines = []
            vals = mesh.vertices if not has_uv else np.hstack([mesh.vertices, mesh.uv])
            for row in vals:
                lines.append(" ".join(repr(float(x)) for x in row))
            for a, b, c in mesh.faces:
                lines.append(f"3 {a} {b} {c}")
            fh.write(("\n".join(lines) + "\n").encode("ascii"))


# ---------------------------------------------------------------------------
# landmarks

def load_landmarks(path) -> LandmarkSet:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise MeshFormatError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MeshFormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "landmarks" not in doc:
        raise MeshFormatError(f"{path}: expected an object with a 'landmarks' key")
    try:
        return LandmarkSet(doc["landmarks"])
    except ValidationError as exc:
        raise MeshFormatError(f"{path}: {exc}") from exc


def save_landmarks(lms: LandmarkSet, path) -> None:
    with open(path, "w") as fh:
        json.dump(lms.to_json(), fh, indent=2)
        fh.write("\n")


def dump_json(obj, path) -> None:
    """Write JSON deterministically (sorted keys, repr floats)."""
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")

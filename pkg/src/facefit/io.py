"""Codecs for every file format the pipeline reads or writes.

Binary formats (PFM, PGM, P3DM) round-trip byte-identically; text formats
(OBJ, PLY) round-trip to the printed precision.  Byte layouts are documented
in docs/formats.md.
"""
import json
import re
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (DimensionMismatch, IndexOutOfRange, MalformedHeader,
                     NonFiniteData, TruncatedFile)
from .evalbench.pointcloud import PointCloud
from .maps import MapImage

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib


# --- PFM ----------------------------------------------------------------------

def _read_header_lines(buf, n_lines, fmt):
    """Split ``n_lines`` whitespace-terminated header lines off ``buf``."""
    pos = 0
    lines = []
    for _ in range(n_lines):
        end = buf.find(b"\n", pos)
        if end < 0:
            raise MalformedHeader(f"{fmt}: header ends early at byte {len(buf)}")
        lines.append(buf[pos:end].decode("ascii", errors="replace").strip())
        pos = end + 1
    return lines, pos


def encode_pfm(image, scale=-1.0):
    """Bytes of a PFM file; negative ``scale`` means little-endian."""
    data = image.data
    C = data.shape[2]
    if C == 1:
        tag, out = b"Pf", data[:, :, :1]
    elif C in (2, 3):
        tag = b"PF"
        out = np.zeros(data.shape[:2] + (3,), dtype=np.float32)
        out[:, :, :C] = data
    else:
        raise DimensionMismatch(f"PFM stores 1-3 channels, got {C}")
    out = out.copy()
    out[~image.valid] = np.nan
    dtype = "<f4" if scale < 0 else ">f4"
    # PFM stores rows bottom-to-top
    body = np.ascontiguousarray(out[::-1]).astype(dtype).tobytes()
    header = b"%s\n%d %d\n%s\n" % (tag, data.shape[1], data.shape[0], repr(float(scale)).encode())
    return header + body


def decode_pfm(buf, channels=None, return_scale=False):
    """MapImage from PFM bytes (and the header scale if ``return_scale``)."""
    (tag, dims, scale_line), pos = _read_header_lines(buf, 3, "PFM")
    if tag not in ("PF", "Pf"):
        raise MalformedHeader(f"PFM: bad magic {tag!r}")
    try:
        width, height = (int(v) for v in dims.split())
        scale = float(scale_line)
    except ValueError:
        raise MalformedHeader(f"PFM: cannot parse dims {dims!r} / scale {scale_line!r}") from None
    if width <= 0 or height <= 0 or scale == 0:
        raise MalformedHeader("PFM: non-positive dimensions or zero scale")
    C = 3 if tag == "PF" else 1
    need = width * height * C * 4
    if len(buf) - pos < need:
        raise TruncatedFile(f"PFM: expected {need} data bytes, found {len(buf) - pos}", len(buf))
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(buf, dtype=dtype, count=width * height * C, offset=pos)
    arr = arr.reshape(height, width, C)[::-1].astype(np.float32)
    valid = np.all(np.isfinite(arr), axis=2)
    if channels is not None:
        if channels > C:
            raise DimensionMismatch(f"PFM has {C} channels, {channels} requested")
        arr = arr[:, :, :channels]
    image = MapImage(np.ascontiguousarray(arr), valid)
    return (image, scale) if return_scale else image


def save_map(path, image, scale=-1.0):
    with open(path, "wb") as f:
        f.write(encode_pfm(image, scale))


def load_map(path, channels=None, return_scale=False):
    """Read a PFM; pixels with any non-finite channel are invalid.

    ``channels=2`` keeps the first two channels of a colour PFM (uv maps).
    Saving with the returned scale reproduces a canonical file byte for byte.
    """
    with open(path, "rb") as f:
        return decode_pfm(f.read(), channels, return_scale)


# --- PGM ----------------------------------------------------------------------

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def encode_pgm(valid):
    valid = np.asarray(valid, dtype=bool)
    h, w = valid.shape
    return b"P5\n%d %d\n255\n" % (w, h) + (valid.astype(np.uint8) * 255).tobytes()


def decode_pgm(buf):
    tokens = []
    pos = 0
    for _ in range(4):
        m = _PGM_TOKEN.match(buf, pos)
        if m is None:
            raise MalformedHeader(f"PGM: header ends early at byte {pos}")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise MalformedHeader(f"PGM: bad magic {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise MalformedHeader("PGM: non-integer header field") from None
    if maxval != 255:
        raise MalformedHeader(f"PGM: maxval must be 255, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    need = width * height
    if len(buf) - pos < need:
        raise TruncatedFile(f"PGM: expected {need} pixel bytes, found {len(buf) - pos}", len(buf))
    pixels = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(height, width)
    return MapImage.from_mask(pixels != 0)


def save_mask(path, mask):
    valid = mask.valid if isinstance(mask, MapImage) else mask
    with open(path, "wb") as f:
        f.write(encode_pgm(valid))


def load_mask(path):
    with open(path, "rb") as f:
        return decode_pgm(f.read())


# --- OBJ ----------------------------------------------------------------------

@dataclass
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    uv: Optional[np.ndarray] = None


def save_mesh(path, vertices, triangles, uv=None):
    lines = ["# facefit mesh"]
    lines += ["v %.9g %.9g %.9g" % tuple(v) for v in np.asarray(vertices, dtype=np.float64)]
    if uv is not None:
        lines += ["vt %.9g %.9g" % tuple(t) for t in np.asarray(uv, dtype=np.float64)]
        lines += ["f %d/%d %d/%d %d/%d" % (a, a, b, b, c, c) for a, b, c in np.asarray(triangles) + 1]
    else:
        lines += ["f %d %d %d" % tuple(f) for f in np.asarray(triangles) + 1]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _obj_index(token, count, lineno):
    idx = int(token)
    if idx == 0:
        raise IndexOutOfRange(f"OBJ line {lineno}: index 0 is invalid (indices are 1-based)")
    idx = idx - 1 if idx > 0 else count + idx
    if not 0 <= idx < count:
        raise IndexOutOfRange(f"OBJ line {lineno}: index {token} out of range for {count} entries")
    return idx


def load_mesh(path):
    """Read v/vt/f records; polygons are fan-triangulated."""
    verts, uvs, faces, face_uvs = [], [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            key = parts[0]
            if key == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif key == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif key == "f":
                corners = [p.split("/") for p in parts[1:]]
                if len(corners) < 3:
                    raise MalformedHeader(f"OBJ line {lineno}: face with fewer than 3 corners")
                vi = [_obj_index(c[0], len(verts), lineno) for c in corners]
                ti = None
                if all(len(c) > 1 and c[1] for c in corners):
                    ti = [_obj_index(c[1], len(uvs), lineno) for c in corners]
                for k in range(1, len(vi) - 1):
                    faces.append([vi[0], vi[k], vi[k + 1]])
                    face_uvs.append(None if ti is None else [ti[0], ti[k], ti[k + 1]])
    vertices = np.array(verts, dtype=np.float64).reshape(-1, 3)
    triangles = np.array(faces, dtype=np.int64).reshape(-1, 3)
    uv = None
    if uvs and face_uvs and all(t is not None for t in face_uvs):
        uv_arr = np.array(uvs, dtype=np.float64)
        per_vertex = np.full((len(vertices), 2), np.nan)
        per_vertex[triangles.ravel()] = uv_arr[np.array(face_uvs).ravel()]
        if np.all(np.isfinite(per_vertex)):
            uv = per_vertex
    return Mesh(vertices, triangles, uv)


# --- PLY (ascii point clouds) ---------------------------------------------------

_REQUIRED_PLY = ("x", "y", "z", "nx", "ny", "nz")


def save_pointcloud(path, cloud, scale=1.0):
    """Write ascii PLY; ``scale`` divides positions (inverse of loading)."""
    has_labels = cloud.labels is not None
    header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    header += [f"property float {p}" for p in _REQUIRED_PLY]
    if has_labels:
        header.append("property int label")
    header.append("end_header")
    pts = cloud.points / scale
    rows = []
    for i in range(len(cloud)):
        row = "%.9g %.9g %.9g %.9g %.9g %.9g" % (*pts[i], *cloud.normals[i])
        if has_labels:
            row += " %d" % cloud.labels[i]
        rows.append(row)
    with open(path, "w") as f:
        f.write("\n".join(header + rows) + "\n")


def load_pointcloud(path, scale=1.0):
    """Read an ascii PLY with ``x y z nx ny nz [label]`` vertex properties.

    ``scale`` multiplies positions, e.g. 1000 for meters to millimeters.
    """
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise MalformedHeader("PLY: missing 'ply' magic or 'end_header'")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body_start = raw.find(b"\n", end) + 1
    if body_start == 0:
        body_start = len(raw)
    count, props, in_vertex, fmt = None, [], False, None
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            props.append(parts[-1])
    if fmt != "ascii":
        raise MalformedHeader(f"PLY: only ascii format is supported, got {fmt!r}")
    if count is None:
        raise MalformedHeader("PLY: no vertex element")
    missing = [p for p in _REQUIRED_PLY if p not in props]
    if missing:
        raise MalformedHeader(f"PLY: missing vertex properties {missing}")
    cols = [props.index(p) for p in _REQUIRED_PLY]
    label_col = props.index("label") if "label" in props else None

    body = raw[body_start:]
    lines = body.split(b"\n")
    rows = []
    offset = body_start
    for i in range(count):
        if i >= len(lines) or not lines[i].strip():
            raise TruncatedFile(f"PLY: expected {count} vertex rows, found {i}", offset)
        rows.append(lines[i].split())
        offset += len(lines[i]) + 1
    try:
        table = np.array(rows, dtype=np.float64)
    except ValueError:
        raise MalformedHeader("PLY: vertex rows have inconsistent or non-numeric fields") from None
    if table.ndim != 2 or table.shape[1] < len(props):
        raise MalformedHeader(f"PLY: vertex rows need {len(props)} fields")
    points = table[:, cols[:3]] * scale
    normals = table[:, cols[3:]]
    labels = table[:, label_col].astype(np.int64) if label_col is not None else None
    if not (np.all(np.isfinite(points)) and np.all(np.isfinite(normals))):
        raise NonFiniteData("PLY: non-finite coordinates")
    return PointCloud(points, normals, labels)


# --- P3DM model files -----------------------------------------------------------

P3DM_MAGIC = b"P3DM1\n"


def encode_p3dm(model):
    N = model.template_vertices.shape[0]
    F = model.triangles.shape[0]
    chunks = [P3DM_MAGIC, struct.pack("<4I", N, F, model.n_id, model.n_ex)]

    def f32(a):
        return np.ascontiguousarray(a, dtype="<f4").tobytes()

    chunks += [f32(model.template_vertices), np.ascontiguousarray(model.triangles, dtype="<u4").tobytes(),
               f32(model.id_basis), f32(model.ex_basis), f32(model.jaw_joint),
               f32(model.jaw_weights), f32(model.vertex_uv)]
    lm = np.asarray(model.landmark_vertex_ids)
    chunks += [struct.pack("<I", lm.size), np.ascontiguousarray(lm, dtype="<u4").tobytes()]
    return b"".join(chunks)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, dtype, count, field):
        size = np.dtype(dtype).itemsize * count
        if self.pos + size > len(self.buf):
            raise TruncatedFile(f"P3DM: field '{field}' needs {size} bytes, "
                                f"{len(self.buf) - self.pos} remain", self.pos)
        arr = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.pos)
        self.pos += size
        return arr


def decode_p3dm(buf):
    from .model import MorphableModel

    if not buf.startswith(P3DM_MAGIC):
        raise MalformedHeader(f"P3DM: missing magic header, got {buf[:6]!r}")
    r = _Reader(buf)
    r.pos = len(P3DM_MAGIC)
    N, F, K_id, K_ex = (int(v) for v in r.take("<u4", 4, "header"))
    template = r.take("<f4", N * 3, "template").reshape(N, 3)
    tris = r.take("<u4", F * 3, "triangles").reshape(F, 3)
    id_basis = r.take("<f4", N * 3 * K_id, "id_basis").reshape(N, 3, K_id)
    ex_basis = r.take("<f4", N * 3 * K_ex, "ex_basis").reshape(N, 3, K_ex)
    jaw_joint = r.take("<f4", 3, "jaw_joint")
    jaw_weights = r.take("<f4", N, "jaw_weights")
    vertex_uv = r.take("<f4", N * 2, "vertex_uv").reshape(N, 2)
    (n_lm,) = r.take("<u4", 1, "landmark_count")
    landmarks = r.take("<u4", int(n_lm), "landmarks")
    if r.pos != len(buf):
        raise MalformedHeader(f"P3DM: {len(buf) - r.pos} trailing bytes after landmarks")
    return MorphableModel(
        template_vertices=template.astype(np.float64),
        triangles=tris.astype(np.int64),
        id_basis=id_basis.astype(np.float64),
        ex_basis=ex_basis.astype(np.float64),
        jaw_joint=jaw_joint.astype(np.float64),
        jaw_weights=jaw_weights.astype(np.float64),
        vertex_uv=vertex_uv.astype(np.float64),
        landmark_vertex_ids=landmarks.astype(np.int64),
    )


def write_p3dm(path, model):
    with open(path, "wb") as f:
        f.write(encode_p3dm(model))


def read_p3dm(path):
    """Decode without validation (``model.load_model`` validates)."""
    with open(path, "rb") as f:
        return decode_p3dm(f.read())


# --- JSON / config ----------------------------------------------------------------

def read_json(path):
    with open(path) as f:
        return json.load(f)


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def read_config(path):
    """Flat key/value mapping from a ``.json`` or ``.toml`` file."""
    path = str(path)
    if path.endswith(".toml"):
        with open(path, "rb") as f:
            return tomllib.load(f)
    return read_json(path)

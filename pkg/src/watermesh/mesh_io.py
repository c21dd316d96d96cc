"""Mesh and point-cloud I/O plus coordinate normalization.

Supported formats: OBJ (ASCII), PLY (ASCII and binary little-endian),
OFF (ASCII) for meshes; PLY and XYZ text for point clouds.  Only vertex
positions are kept; texture/normal attributes are parsed and discarded.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCloud, EmptyMesh, ParseError


@dataclass
class TriangleSoup:
    """Raw indexed triangle list with no topology guarantees.

    Faces with repeated vertex indices are never stored; loaders divert
    them into ``warnings`` so degeneracies stay visible.
    """

    vertices: np.ndarray
    faces: np.ndarray
    provenance: str = ""
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and self.faces.max(initial=-1) >= len(self.vertices):
            raise ParseError(0, "face index out of range")
        if len(self.faces) and self.faces.min(initial=0) < 0:
            raise ParseError(0, "negative face index after resolution")

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)


@dataclass
class NormalizationTransform:
    """Recenter + uniform scale mapping model units into the unit-ish cube."""

    center: np.ndarray
    scale: float

    def apply(self, points):
        return (np.asarray(points, dtype=np.float64) - self.center) * self.scale

    def invert(self, points):
        return np.asarray(points, dtype=np.float64) / self.scale + self.center

    @staticmethod
    def identity():
        return NormalizationTransform(np.zeros(3), 1.0)


@dataclass
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return len(self.points)


# Largest normalized coordinate magnitude after normalize().  Strictly below 1
# so projection targets near the surface stay well inside the root volume.
NORMALIZE_TARGET = 0.9


def normalize(soup: TriangleSoup):
    """Recenter the soup on its bounding-box center and scale the largest
    half-extent to NORMALIZE_TARGET.

    Returns (normalized soup, transform).  The transform maps model units
    to the normalized frame; ``transform.invert`` undoes it.
    """
    if soup.n_vertices == 0:
        raise EmptyMesh("cannot normalize an empty mesh")
    lo = soup.vertices.min(axis=0)
    hi = soup.vertices.max(axis=0)
    center = (lo + hi) / 2.0
    half = float((hi - lo).max()) / 2.0
    if half <= 0.0:
        # Single point or fully degenerate cloud of coincident vertices.
        scale = 1.0
    else:
        scale = NORMALIZE_TARGET / half
    tf = NormalizationTransform(center, scale)
    out = TriangleSoup(tf.apply(soup.vertices), soup.faces.copy(),
                       provenance=soup.provenance, warnings=list(soup.warnings))
    return out, tf


def normalize_points(cloud: PointCloud):
    """Point-cloud analogue of normalize() for scan mode."""
    if len(cloud) == 0:
        raise EmptyCloud("cannot normalize an empty cloud")
    lo = cloud.points.min(axis=0)
    hi = cloud.points.max(axis=0)
    center = (lo + hi) / 2.0
    half = float((hi - lo).max()) / 2.0
    scale = NORMALIZE_TARGET / half if half > 0 else 1.0
    tf = NormalizationTransform(center, scale)
    return PointCloud(tf.apply(cloud.points)), tf


def drop_degenerate_faces(soup: TriangleSoup, area_eps: float = 1e-12):
    """Remove zero-area faces (area below ``area_eps``); assumed to run on
    normalized coordinates.  Repeated-index faces were already dropped by
    the loaders.  Returns a new soup; records how many faces were removed.
    """
    if soup.n_faces == 0:
        return soup
    v = soup.vertices
    f = soup.faces
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    area2 = np.linalg.norm(cross, axis=1)
    keep = area2 > 2.0 * area_eps
    dropped = int((~keep).sum())
    out = TriangleSoup(v, f[keep], provenance=soup.provenance, warnings=list(soup.warnings))
    if dropped:
        out.warnings.append(f"dropped {dropped} zero-area faces")
    return out


def _fan_triangulate(poly, faces_out, warnings, line_no):
    """Append fan triangles for one polygon; divert degenerate ones."""
    if len(poly) < 3:
        warnings.append(f"line {line_no}: face with {len(poly)} vertices ignored")
        return
    for i in range(1, len(poly) - 1):
        tri = (poly[0], poly[i], poly[i + 1])
        if tri[0] == tri[1] or tri[1] == tri[2] or tri[0] == tri[2]:
            warnings.append(f"line {line_no}: degenerate face {tri} dropped")
        else:
            faces_out.append(tri)


def _load_obj(path):
    vertices = []
    faces = []
    warnings = []
    with open(path, "r", errors="replace") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ParseError(line_no, "vertex with fewer than 3 coordinates")
                try:
                    vertices.append((float(parts[1]), float(parts[2]), float(parts[3])))
                except ValueError as exc:
                    raise ParseError(line_no, f"bad vertex coordinate: {exc}") from None
            elif tag == "f":
                poly = []
                for tok in parts[1:]:
                    # "idx", "idx/uv", "idx/uv/n", "idx//n"; only positions matter
                    head = tok.split("/")[0]
                    try:
                        idx = int(head)
                    except ValueError:
                        raise ParseError(line_no, f"bad face index {tok!r}") from None
                    if idx < 0:
                        idx = len(vertices) + idx
                    else:
                        idx -= 1
                    if idx < 0 or idx >= len(vertices):
                        raise ParseError(line_no, f"face index {tok} out of range")
                    poly.append(idx)
                _fan_triangulate(poly, faces, warnings, line_no)
            # all other tags (vn, vt, o, g, s, usemtl, ...) are ignored
    return vertices, faces, warnings


def _load_off(path):
    with open(path, "r", errors="replace") as fh:
        tokens = []
        line_of_token = []
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                for tok in line.split():
                    tokens.append(tok)
                    line_of_token.append(line_no)
    if not tokens or tokens[0] != "OFF":
        raise ParseError(1, "missing OFF header")
    pos = 1
    try:
        nv, nf = int(tokens[pos]), int(tokens[pos + 1])
        pos += 3  # skip edge count
        vertices = []
        for _ in range(nv):
            vertices.append((float(tokens[pos]), float(tokens[pos + 1]), float(tokens[pos + 2])))
            pos += 3
        faces = []
        warnings = []
        for _ in range(nf):
            k = int(tokens[pos])
            poly = [int(t) for t in tokens[pos + 1: pos + 1 + k]]
            _fan_triangulate(poly, faces, warnings, line_of_token[min(pos, len(tokens) - 1)])
            pos += 1 + k
    except (IndexError, ValueError) as exc:
        line = line_of_token[min(pos, len(line_of_token) - 1)] if line_of_token else 0
        raise ParseError(line, f"truncated or malformed OFF data: {exc}") from None
    for f in faces:
        for idx in f:
            if idx < 0 or idx >= nv:
                raise ParseError(0, f"face index {idx} out of range")
    return vertices, faces, warnings


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(fh):
    magic = fh.readline().strip()
    if magic != b"ply":
        raise ParseError(1, "missing ply magic")
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype, is_list, count_dtype)])
    line_no = 1
    while True:
        raw = fh.readline()
        line_no += 1
        if not raw:
            raise ParseError(line_no, "unexpected end of PLY header")
        parts = raw.decode("ascii", errors="replace").split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise ParseError(line_no, "property before element")
            if parts[1] == "list":
                elements[-1][2].append((parts[4], _PLY_TYPES[parts[3]], True, _PLY_TYPES[parts[2]]))
            else:
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]], False, None))
        elif parts[0] == "end_header":
            break
        # comment / obj_info ignored
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(line_no, f"unsupported PLY format {fmt!r}")
    return fmt, elements, line_no


def _load_ply(path, want_faces=True):
    with open(path, "rb") as fh:
        fmt, elements, line_no = _parse_ply_header(fh)
        vertices = np.zeros((0, 3))
        faces = []
        warnings = []
        for name, count, props in elements:
            has_list = any(p[2] for p in props)
            if fmt == "ascii":
                rows = []
                for _ in range(count):
                    raw = fh.readline()
                    line_no += 1
                    if not raw:
                        raise ParseError(line_no, f"truncated element {name}")
                    rows.append(raw.split())
                if name == "vertex":
                    names = [p[0] for p in props]
                    try:
                        ix, iy, iz = names.index("x"), names.index("y"), names.index("z")
                    except ValueError:
                        raise ParseError(line_no, "vertex element lacks x/y/z") from None
                    vertices = np.array(
                        [[float(r[ix]), float(r[iy]), float(r[iz])] for r in rows])
                elif name == "face" and want_faces:
                    for r in rows:
                        k = int(r[0])
                        _fan_triangulate([int(t) for t in r[1:1 + k]], faces, warnings, line_no)
            else:
                if not has_list:
                    dt = np.dtype([(p[0], "<" + p[1]) for p in props])
                    data = np.frombuffer(fh.read(dt.itemsize * count), dtype=dt, count=count)
                    if name == "vertex":
                        try:
                            vertices = np.stack(
                                [data["x"], data["y"], data["z"]], axis=1).astype(np.float64)
                        except KeyError:
                            raise ParseError(line_no, "vertex element lacks x/y/z") from None
                else:
                    # list properties force row-by-row reads
                    for _ in range(count):
                        row_vals = []
                        for pname, dtype, is_list, cnt_dtype in props:
                            if is_list:
                                (k,) = struct.unpack(
                                    "<" + {"u1": "B", "i1": "b", "u2": "H", "i2": "h",
                                           "u4": "I", "i4": "i"}[cnt_dtype],
                                    fh.read(np.dtype(cnt_dtype).itemsize))
                                vals = np.frombuffer(
                                    fh.read(np.dtype(dtype).itemsize * k),
                                    dtype="<" + dtype, count=k)
                                row_vals.append(vals)
                            else:
                                fh.read(np.dtype(dtype).itemsize)
                        if name == "face" and want_faces and row_vals:
                            _fan_triangulate([int(t) for t in row_vals[0]], faces, warnings, 0)
    return vertices, faces, warnings


def load_mesh(path, fmt="auto") -> TriangleSoup:
    """Load a triangle soup from OBJ, PLY, or OFF.

    Polygonal faces are fan-triangulated; faces with repeated indices are
    dropped and recorded in soup.warnings.

    Raises:
        FileNotFoundError: missing file.
        ParseError: malformed content.
        EmptyMesh: file parsed but contains no vertices.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if fmt == "auto":
        fmt = os.path.splitext(path)[1].lstrip(".").lower() or "obj"
    fmt = fmt.lower()
    if fmt == "obj":
        vertices, faces, warnings = _load_obj(path)
    elif fmt == "off":
        vertices, faces, warnings = _load_off(path)
    elif fmt == "ply":
        vertices, faces, warnings = _load_ply(path)
    else:
        raise ParseError(0, f"unknown mesh format {fmt!r}")
    if len(vertices) == 0:
        raise EmptyMesh(f"{path}: no vertices")
    verts = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    face_arr = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    return TriangleSoup(verts, face_arr, provenance=str(path), warnings=warnings)


def load_point_cloud(paths) -> PointCloud:
    """Concatenate PLY/XYZ point files into one cloud (shared world frame)."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    chunks = []
    for path in paths:
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        ext = os.path.splitext(path)[1].lower()
        if ext == ".ply":
            pts, _, _ = _load_ply(path, want_faces=False)
            if len(pts):
                chunks.append(np.asarray(pts, dtype=np.float64))
        else:
            rows = []
            with open(path, "r", errors="replace") as fh:
                for line_no, raw in enumerate(fh, start=1):
                    line = raw.split("#", 1)[0].strip()
                    if not line:
                        continue
                    parts = line.split()
                    if len(parts) < 3:
                        raise ParseError(line_no, f"{path}: expected 'x y z'")
                    try:
                        rows.append((float(parts[0]), float(parts[1]), float(parts[2])))
                    except ValueError as exc:
                        raise ParseError(line_no, f"{path}: {exc}") from None
            if rows:
                chunks.append(np.array(rows))
    if not chunks or sum(len(c) for c in chunks) == 0:
        raise EmptyCloud("no readable points in input files")
    return PointCloud(np.vstack(chunks))


def _write_obj(path, vertices, faces):
    with open(path, "w") as fh:
        for v in vertices:
            fh.write("v %.9g %.9g %.9g\n" % (v[0], v[1], v[2]))
        for f in faces:
            fh.write("f %d %d %d\n" % (f[0] + 1, f[1] + 1, f[2] + 1))


def _write_off(path, vertices, faces):
    with open(path, "w") as fh:
        fh.write("OFF\n%d %d 0\n" % (len(vertices), len(faces)))
        for v in vertices:
            fh.write("%.9g %.9g %.9g\n" % (v[0], v[1], v[2]))
        for f in faces:
            fh.write("3 %d %d %d\n" % (f[0], f[1], f[2]))


def _write_ply(path, vertices, faces, binary):
    header = (
        "ply\nformat %s 1.0\nelement vertex %d\n"
        "property double x\nproperty double y\nproperty double z\n"
        "element face %d\nproperty list uchar int vertex_indices\nend_header\n"
        % ("binary_little_endian" if binary else "ascii", len(vertices), len(faces))
    )
    if binary:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(np.ascontiguousarray(vertices, dtype="<f8").tobytes())
            if len(faces):
                rec = np.empty(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
                rec["n"] = 3
                rec["idx"] = faces
                fh.write(rec.tobytes())
    else:
        with open(path, "w") as fh:
            fh.write(header)
            for v in vertices:
                fh.write("%.9g %.9g %.9g\n" % (v[0], v[1], v[2]))
            for f in faces:
                fh.write("3 %d %d %d\n" % (f[0], f[1], f[2]))


def save_mesh(mesh, transform: NormalizationTransform, path, fmt="auto"):
    """Write a mesh in original model units (inverse transform applied).

    ``mesh`` is anything exposing .vertices (n,3) and .faces (m,3); callers
    are expected to have validated watertightness before shipping output.
    ``fmt`` 'ply-binary' selects binary PLY for large outputs.
    """
    if fmt == "auto":
        fmt = os.path.splitext(path)[1].lstrip(".").lower() or "obj"
    fmt = fmt.lower()
    vertices = transform.invert(mesh.vertices)
    faces = np.asarray(mesh.faces, dtype=np.int64)
    try:
        if fmt == "obj":
            _write_obj(path, vertices, faces)
        elif fmt == "off":
            _write_off(path, vertices, faces)
        elif fmt == "ply":
            _write_ply(path, vertices, faces, binary=False)
        elif fmt in ("ply-binary", "plyb"):
            _write_ply(path, vertices, faces, binary=True)
        else:
            raise ValueError(f"unknown output format {fmt!r}")
    except OSError as exc:
        raise IOError(f"cannot write {path}: {exc}") from exc

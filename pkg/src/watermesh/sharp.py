"""Sharp feature recovery: cut edges whose midpoints float off the reference,
subdivide by cut count, and project the new vertices to crease lines and
corners reconstructed from reference planes.

A cut edge gets a midpoint (blue) vertex whose target is the closest point
on the intersection line of the two reference planes its endpoints sit in;
a fully cut triangle additionally gets a central (red) vertex targeted at
the intersection point of its corners' three planes.  All moves go through
the constrained vertex/normal updates so inversion-freedom is preserved.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .extract import HalfEdgeMesh, split_nonmanifold_edges
from .optimize import OptimState, init_state, update_normal, update_vertex
from .spatial import NearestPointIndex

logger = logging.getLogger(__name__)

# an edge midpoint farther than this fraction of the voxel size from the
# reference breaks a sharp feature
SHARP_REL_THRESHOLD = 1e-3
MAX_SHARP_PASSES = 2
_PARALLEL_COS = np.cos(np.radians(1.0))  # plane pairs closer than 1 degree
_CORNER_COND_LIMIT = 1e8


@dataclass
class NewVertex:
    """A vertex inserted by subdivision, remembering what it must target."""

    vid: int
    kind: str                # "blue" (edge midpoint) or "red" (face center)
    anchors: tuple           # blue: (u, w) edge endpoints; red: (a, b, c)


@dataclass
class SharpCutPlan:
    cut_edges: set                      # undirected (u, w) pairs, u < w
    face_cuts: np.ndarray               # per-face cut count in {0,1,2,3}
    new_vertices: list = field(default_factory=list)  # filled by subdivide


def detect_cut_edges(mesh: HalfEdgeMesh, index: NearestPointIndex,
                     voxel_size: float, threshold_multiplier: float = 1.0):
    """Edges whose midpoint sits farther than threshold * voxel size from
    the reference.  Returns a set of (u, w) vertex pairs with u < w."""
    origin, dest = mesh.halfedge_endpoints()
    lo = np.minimum(origin, dest)
    hi = np.maximum(origin, dest)
    key = lo * mesh.n_vertices + hi
    _, first = np.unique(key, return_index=True)
    mids = 0.5 * (mesh.vertices[lo[first]] + mesh.vertices[hi[first]])
    _, d2, _ = index.query(mids)
    thresh = SHARP_REL_THRESHOLD * voxel_size * threshold_multiplier
    flagged = np.sqrt(d2) > thresh
    return {(int(lo[first][i]), int(hi[first][i]))
            for i in np.nonzero(flagged)[0]}


def plan_cuts(mesh: HalfEdgeMesh, cut_edges) -> SharpCutPlan:
    face_cuts = np.zeros(mesh.n_faces, dtype=np.int64)
    f = mesh.faces
    for s in range(3):
        u = f[:, s]
        w = f[:, (s + 1) % 3]
        keys = list(zip(np.minimum(u, w).tolist(), np.maximum(u, w).tolist()))
        face_cuts += np.fromiter((k in cut_edges for k in keys), dtype=np.int64,
                                 count=mesh.n_faces)
    return SharpCutPlan(cut_edges=set(cut_edges), face_cuts=face_cuts)


def subdivide(mesh: HalfEdgeMesh, plan: SharpCutPlan) -> HalfEdgeMesh:
    """Apply the per-face cut patterns: 1 cut -> 2 triangles, 2 cuts -> 3,
    3 cuts -> 6 around a central red vertex.  Shared midpoints keep the mesh
    closed; the rebuilt mesh passes the half-edge invariants."""
    if not plan.cut_edges:
        plan.new_vertices = []
        return mesh
    verts = [mesh.vertices]
    next_vid = mesh.n_vertices
    mid_id = {}
    new_vertices = []

    def midpoint(u, w):
        nonlocal next_vid
        k = (min(u, w), max(u, w))
        if k not in mid_id:
            mid_id[k] = next_vid
            verts.append(0.5 * (mesh.vertices[u] + mesh.vertices[w])[None, :])
            new_vertices.append(NewVertex(next_vid, "blue", k))
            next_vid += 1
        return mid_id[k]

    faces_out = []
    for fi in range(mesh.n_faces):
        a, b, c = (int(v) for v in mesh.faces[fi])
        cuts = [(min(a, b), max(a, b)) in plan.cut_edges,
                (min(b, c), max(b, c)) in plan.cut_edges,
                (min(c, a), max(c, a)) in plan.cut_edges]
        n = sum(cuts)
        if n == 0:
            faces_out.append((a, b, c))
        elif n == 1:
            # rotate so the cut edge is (a, b)
            while not cuts[0]:
                a, b, c = b, c, a
                cuts = cuts[1:] + cuts[:1]
            m = midpoint(a, b)
            faces_out.append((a, m, c))
            faces_out.append((m, b, c))
        elif n == 2:
            # rotate so the cut edges are (a, b) and (b, c)
            while cuts[2] or not cuts[0]:
                a, b, c = b, c, a
                cuts = cuts[1:] + cuts[:1]
            m1 = midpoint(a, b)
            m2 = midpoint(b, c)
            faces_out.append((m1, b, m2))
            faces_out.append((a, m1, c))
            faces_out.append((m1, m2, c))
        else:
            m1 = midpoint(a, b)
            m2 = midpoint(b, c)
            m3 = midpoint(c, a)
            r = next_vid
            verts.append(mesh.vertices[[a, b, c]].mean(axis=0)[None, :])
            new_vertices.append(NewVertex(r, "red", (a, b, c)))
            next_vid += 1
            faces_out.append((a, m1, m3))
            faces_out.append((b, m2, m1))
            faces_out.append((c, m3, m2))
            faces_out.append((m1, m2, r))
            faces_out.append((m2, m3, r))
            faces_out.append((m3, m1, r))
    out = HalfEdgeMesh(np.vstack(verts), np.array(faces_out, dtype=np.int64))
    split_nonmanifold_edges(out)
    out.check_halfedge_invariants()
    plan.new_vertices = new_vertices
    return out


def _plane_of(index, point):
    """Supporting plane (unit normal, offset) of the reference triangle
    containing the nearest point to ``point``."""
    _, _, prim = index.query(np.asarray(point).reshape(1, 3))
    tri = index.triangle(int(prim[0]))
    n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
    norm = np.linalg.norm(n)
    if norm < 1e-300:
        return None
    n = n / norm
    return n, float(n @ tri[0])


def project_sharp(mesh: HalfEdgeMesh, state: OptimState,
                  index: NearestPointIndex, new_vertices):
    """Move blue vertices to two-plane intersection lines and red vertices to
    three-plane intersection points, through the constrained updates.
    Near-parallel or ill-conditioned plane sets fall back to plain
    nearest-point projection."""
    fallbacks = 0
    for nv in new_vertices:
        pos = state.positions[nv.vid]
        target = None
        if nv.kind == "blue":
            u, w = nv.anchors
            pu = _plane_of(index, state.positions[u])
            pw = _plane_of(index, state.positions[w])
            if pu is not None and pw is not None and abs(pu[0] @ pw[0]) < _PARALLEL_COS:
                n1, d1 = pu
                n2, d2 = pw
                G = np.array([[1.0, n1 @ n2], [n1 @ n2, 1.0]])
                rhs = np.array([d1 - n1 @ pos, d2 - n2 @ pos])
                lam = np.linalg.solve(G, rhs)
                target = pos + lam[0] * n1 + lam[1] * n2
            else:
                fallbacks += 1
        else:
            planes = [_plane_of(index, state.positions[a]) for a in nv.anchors]
            if all(p is not None for p in planes):
                N = np.stack([p[0] for p in planes])
                d = np.array([p[1] for p in planes])
                if np.linalg.cond(N) < _CORNER_COND_LIMIT:
                    target = np.linalg.solve(N, d)
            if target is None:
                fallbacks += 1
        update_vertex(state, nv.vid, index, target=target)
        update_normal(state, nv.vid)
    if fallbacks:
        logger.debug("%d sharp targets fell back to nearest-point projection",
                     fallbacks)
    return fallbacks


def sharp_pass(mesh: HalfEdgeMesh, index: NearestPointIndex, voxel_size: float,
               threshold_multiplier: float = 1.0):
    """One detect/subdivide/project round.  Returns (mesh, state, n_cut);
    state is None when nothing was cut."""
    cut = detect_cut_edges(mesh, index, voxel_size, threshold_multiplier)
    if not cut:
        return mesh, None, 0
    plan = plan_cuts(mesh, cut)
    mesh = subdivide(mesh, plan)
    state = init_state(mesh, strict=False)
    project_sharp(mesh, state, index, plan.new_vertices)
    mesh.vertices[:] = state.positions
    return mesh, state, len(cut)


def preserve_sharp_features(mesh: HalfEdgeMesh, index: NearestPointIndex,
                            voxel_size: float, threshold_multiplier: float = 1.0,
                            max_passes: int = MAX_SHARP_PASSES):
    """Run up to ``max_passes`` sharp rounds (stops early once nothing is cut)."""
    total = 0
    for _ in range(max_passes):
        mesh, state, n = sharp_pass(mesh, index, voxel_size, threshold_multiplier)
        total += n
        if n == 0:
            break
    return mesh, total

"""Topology validators and accuracy metrics.

``validate_topology`` works on any indexed triangle mesh and counts
boundary edges (1 incident face), non-manifold edges (3+), non-manifold
vertices (incident faces forming more than one edge-connected fan), and
inversions (a face whose normal has negative dot product with any of its
vertices' area-weighted normals).

``accuracy`` reports target-to-reference and reference-to-target distances
(max and mean) in the evaluation frame where the reference bounding box's
longest axis spans two units; the raw-frame values differ by the reported
``frame_scale`` factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

from .mesh_io import PointCloud
from .octree import EXTERIOR, OCCUPIED, ROOT_MIN, ROOT_SIDE
from .spatial import build_index


@dataclass
class ValidationReport:
    boundary_edge_count: int
    nonmanifold_edge_count: int
    nonmanifold_vertex_count: int
    inversion_count: int

    @property
    def is_watertight_manifold(self):
        return (self.boundary_edge_count == 0 and self.nonmanifold_edge_count == 0
                and self.nonmanifold_vertex_count == 0 and self.inversion_count == 0)

    def as_dict(self):
        return {
            "boundary_edges": self.boundary_edge_count,
            "nonmanifold_edges": self.nonmanifold_edge_count,
            "nonmanifold_vertices": self.nonmanifold_vertex_count,
            "inversions": self.inversion_count,
            "watertight_manifold": int(self.is_watertight_manifold),
        }


@dataclass
class AccuracyReport:
    """Distances in the two-unit evaluation frame.  Divide by ``frame_scale``
    to recover the frame the meshes were handed in."""

    t2r_max: float
    t2r_mean: float
    r2t_max: float
    r2t_mean: float
    frame_scale: float = 1.0

    def as_dict(self):
        return {
            "t2r_max": self.t2r_max, "t2r_mean": self.t2r_mean,
            "r2t_max": self.r2t_max, "r2t_mean": self.r2t_mean,
            "frame_scale": self.frame_scale,
        }


@njit(cache=True)
def _union_find_roots(parent):
    for i in range(parent.shape[0]):
        r = i
        while parent[r] != r:
            r = parent[r]
        while parent[i] != r:
            nxt = parent[i]
            parent[i] = r
            i = nxt
    return parent


@njit(cache=True)
def _union_pairs(parent, pa, pb):
    for k in range(pa.shape[0]):
        a = pa[k]
        b = pb[k]
        while parent[a] != a:
            a = parent[a]
        while parent[b] != b:
            b = parent[b]
        if a != b:
            if a < b:
                parent[b] = a
            else:
                parent[a] = b


def validate_topology(mesh) -> ValidationReport:
    """Count the four watertight-manifold violations on an indexed mesh
    (anything with .vertices and .faces)."""
    vertices = np.asarray(mesh.vertices, dtype=np.float64)
    faces = np.asarray(mesh.faces, dtype=np.int64)
    if len(faces) == 0:
        return ValidationReport(0, 0, 0, 0)
    nv = len(vertices)
    origin = faces.reshape(-1)
    dest = faces[:, [1, 2, 0]].reshape(-1)
    key = np.minimum(origin, dest) * nv + np.maximum(origin, dest)
    order = np.argsort(key, kind="stable")
    ks = key[order]
    bounds = np.nonzero(np.diff(ks))[0] + 1
    bounds = np.concatenate([[0], bounds, [len(ks)]])
    sizes = np.diff(bounds)
    boundary = int((sizes == 1).sum())
    nonmanifold_edges = int((sizes >= 3).sum())

    # group incident faces per vertex by shared-edge connectivity: for every
    # manifold edge, union the two faces' corners at each endpoint
    parent = np.arange(3 * len(faces), dtype=np.int64)
    two = np.nonzero(sizes == 2)[0]
    h1 = order[bounds[two]]
    h2 = order[bounds[two] + 1]
    same_dir = origin[h1] == origin[h2]

    def nxt(h):
        return 3 * (h // 3) + (h + 1) % 3

    # opposite direction: corner(h1@origin) ~ corner(next(h2)@dest-of-h2);
    # same direction (flipped winding): corners pair origin-origin, dest-dest
    pa = np.concatenate([h1[~same_dir], h2[~same_dir], h1[same_dir], nxt(h1[same_dir])])
    pb = np.concatenate([nxt(h2[~same_dir]), nxt(h1[~same_dir]),
                         h2[same_dir], nxt(h2[same_dir])])
    _union_pairs(parent, pa.astype(np.int64), pb.astype(np.int64))
    roots = _union_find_roots(parent)
    vr = origin * (3 * len(faces)) + roots  # (vertex, fan root) pairs
    uniq_pairs = np.unique(vr)
    fans_per_vertex = np.bincount((uniq_pairs // (3 * len(faces))).astype(np.int64),
                                  minlength=nv)
    used = np.bincount(origin, minlength=nv) > 0
    nonmanifold_vertices = int((fans_per_vertex[used] > 1).sum())

    # inversion: a face whose normal cannot be made consistent with any
    # assignment of vertex normals.  The area-weighted normal serves as the
    # cheap witness candidate; vertices where it reports a negative dot get
    # the exact orientation-cone feasibility test (the candidate is a poor
    # witness at sharp corners, where small faces legitimately sit nearly
    # orthogonal to the average).
    cross = np.cross(vertices[faces[:, 1]] - vertices[faces[:, 0]],
                     vertices[faces[:, 2]] - vertices[faces[:, 0]])
    sums = np.zeros_like(vertices)
    for s in range(3):
        np.add.at(sums, faces[:, s], cross)
    cmag = np.linalg.norm(cross, axis=1)
    suspects = set()
    neg_pairs = {}
    for s in range(3):
        dots = np.einsum("ij,ij->i", cross, sums[faces[:, s]])
        scale = cmag * np.linalg.norm(sums[faces[:, s]], axis=1) + 1e-300
        rel = dots / scale
        for f in np.nonzero(rel < -1e-12)[0]:
            v = int(faces[f, s])
            suspects.add(v)
            neg_pairs.setdefault(v, set()).add(int(f))
    # a sum that nearly cancels (opposing faces) hides its sign; test those too
    mag_budget = np.zeros(nv)
    np.add.at(mag_budget, faces.reshape(-1), np.repeat(cmag, 3))
    cancelled = np.nonzero((np.linalg.norm(sums, axis=1) < 1e-8 * mag_budget)
                           & (mag_budget > 0))[0]
    suspects.update(int(v) for v in cancelled)
    inverted = set()
    if suspects:
        from .optimize import max_margin_normal
        v2f = {}
        for f in range(len(faces)):
            for s in range(3):
                v2f.setdefault(int(faces[f, s]), []).append(f)
        for v in suspects:
            fs = v2f[v]
            unit = cross[fs]
            mag = np.linalg.norm(unit, axis=1)
            unit = unit[mag > 0] / mag[mag > 0, None]
            _, margin = max_margin_normal(unit)
            if margin <= 1e-12:
                flagged = neg_pairs.get(v, set())
                if not flagged:
                    # no usable sign from the cancelled average: flag the
                    # vertex's faces whose dot is non-positive (all, when
                    # the average vanishes entirely)
                    dots = cross[fs] @ sums[v]
                    flagged = {fs[i] for i in range(len(fs)) if dots[i] <= 0.0}
                inverted.update(flagged)
    return ValidationReport(boundary, nonmanifold_edges,
                            nonmanifold_vertices, len(inverted))


def _sample_surface(vertices, faces, n_samples, rng):
    tv = vertices[faces]
    cross = np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0])
    area = 0.5 * np.linalg.norm(cross, axis=1)
    total = area.sum()
    if total <= 0:
        return np.zeros((0, 3))
    counts = rng.multinomial(n_samples, area / total)
    fi = np.repeat(np.arange(len(faces)), counts)
    r1 = np.sqrt(rng.random(len(fi)))
    r2 = rng.random(len(fi))
    a = tv[fi, 0]
    b = tv[fi, 1]
    c = tv[fi, 2]
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


@njit(cache=True)
def _locate_leaves(first_child, level, coord, pts, out):
    n = pts.shape[0]
    for i in range(n):
        x = pts[i, 0]
        y = pts[i, 1]
        z = pts[i, 2]
        if (x < ROOT_MIN or x > ROOT_MIN + ROOT_SIDE or
                y < ROOT_MIN or y > ROOT_MIN + ROOT_SIDE or
                z < ROOT_MIN or z > ROOT_MIN + ROOT_SIDE):
            out[i] = -1
            continue
        idx = 0
        while first_child[idx] >= 0:
            side = ROOT_SIDE / (1 << level[idx])
            half = side / 2.0
            mnx = ROOT_MIN + coord[idx, 0] * side
            mny = ROOT_MIN + coord[idx, 1] * side
            mnz = ROOT_MIN + coord[idx, 2] * side
            c = 0
            if x >= mnx + half:
                c |= 1
            if y >= mny + half:
                c |= 2
            if z >= mnz + half:
                c |= 4
            idx = first_child[idx] + c
        out[i] = idx
    return out


def exterior_adjacency(tree):
    """Per-node flag: occupied leaf with at least one exterior neighbor
    (or an exterior leaf itself)."""
    n = tree.n_nodes
    owner = np.repeat(np.arange(n), tree.nbr_count.sum(axis=1))
    flag = tree.status[tree.nbr_pool] == EXTERIOR
    adj = np.zeros(n, dtype=bool)
    if len(owner):
        np.logical_or.at(adj, owner, flag)
    vis = (tree.status == OCCUPIED) & (tree.first_child < 0) & adj
    vis |= tree.status == EXTERIOR
    return vis


def accuracy(mesh, reference, n_samples: int = 100_000, seed: int = 0,
             tree=None) -> AccuracyReport:
    """T2R over output vertices, R2T over area-weighted reference samples.

    When an octree is supplied, reference samples are restricted to
    exterior-visible surface (their leaf touches the exterior); interior
    junk geometry is excluded from coverage.  Values are reported in the
    frame where the reference bounding box's longest axis is two units.
    """
    ref_v = np.asarray(reference.vertices, dtype=np.float64)
    extent = float((ref_v.max(axis=0) - ref_v.min(axis=0)).max())
    frame_scale = 2.0 / extent if extent > 0 else 1.0

    ref_index = build_index(reference)
    _, d2, _ = ref_index.query(mesh.vertices)
    t2r = np.sqrt(d2)

    rng = np.random.default_rng(seed)
    samples = _sample_surface(ref_v, np.asarray(reference.faces, dtype=np.int64),
                              n_samples, rng)
    if tree is not None and len(samples):
        leaves = np.empty(len(samples), dtype=np.int64)
        _locate_leaves(tree.first_child, tree.level.astype(np.int64),
                       tree.coord.astype(np.int64), samples, leaves)
        vis = exterior_adjacency(tree)
        keep = (leaves >= 0) & vis[np.maximum(leaves, 0)]
        samples = samples[keep]
    if len(samples):
        out_index = build_index(mesh)
        _, d2, _ = out_index.query(samples)
        r2t = np.sqrt(d2)
    else:
        r2t = np.zeros(1)

    return AccuracyReport(
        t2r_max=float(t2r.max() * frame_scale),
        t2r_mean=float(t2r.mean() * frame_scale),
        r2t_max=float(r2t.max() * frame_scale),
        r2t_mean=float(r2t.mean() * frame_scale),
        frame_scale=frame_scale,
    )


def chamfer(points_a: PointCloud, points_b: PointCloud):
    """Mean nearest-neighbor distance in each direction -> (a2b, b2a)."""
    a = np.asarray(points_a.points if isinstance(points_a, PointCloud) else points_a)
    b = np.asarray(points_b.points if isinstance(points_b, PointCloud) else points_b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer requires non-empty clouds")
    da, _ = cKDTree(b).query(a, k=1)
    db, _ = cKDTree(a).query(b, k=1)
    return float(np.mean(da)), float(np.mean(db))

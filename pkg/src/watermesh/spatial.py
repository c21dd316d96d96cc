"""Exact nearest-point queries against the reference mesh or point cloud.

A median-split AABB tree over reference triangles (mesh mode) or points
(scan mode).  Queries are exact: the returned point minimizes squared
distance over every reference primitive, with ties broken by the lowest
primitive index so results are deterministic.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .errors import EmptyReference
from .mesh_io import PointCloud, TriangleSoup

_LEAF_SIZE = 4


@njit(cache=True)
def _closest_on_triangle(ax, ay, az, bx, by, bz, cx, cy, cz, px, py, pz):
    """Closest point on triangle abc to p (region partition, Ericson)."""
    abx = bx - ax; aby = by - ay; abz = bz - az
    acx = cx - ax; acy = cy - ay; acz = cz - az
    apx = px - ax; apy = py - ay; apz = pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az
    bpx = px - bx; bpy = py - by; bpz = pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        denom = d1 - d3
        v = 0.0 if denom == 0.0 else d1 / denom
        return ax + v * abx, ay + v * aby, az + v * abz
    cpx = px - cx; cpy = py - cy; cpz = pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        denom = d2 - d6
        w = 0.0 if denom == 0.0 else d2 / denom
        return ax + w * acx, ay + w * acy, az + w * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        denom = (d4 - d3) + (d5 - d6)
        w = 0.0 if denom == 0.0 else (d4 - d3) / denom
        return bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz)
    denom = va + vb + vc
    if denom == 0.0:
        return ax, ay, az
    v = vb / denom
    w = vc / denom
    return (ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w)


@njit(cache=True)
def _build_nodes(bb_min, bb_max, cent, order,
                 node_min, node_max, node_a, node_b, node_leaf):
    """Median split on the longest axis; returns node count.

    node_a/node_b are child ids for internal nodes and [start, end) into
    ``order`` for leaves (node_leaf flags which).
    """
    n = order.shape[0]
    stack_node = np.empty(64 * 2, dtype=np.int64)
    stack_lo = np.empty(64 * 2, dtype=np.int64)
    stack_hi = np.empty(64 * 2, dtype=np.int64)
    n_nodes = 1
    sp = 0
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = n
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        lo = stack_lo[sp]
        hi = stack_hi[sp]
        for k in range(3):
            mn = bb_min[order[lo], k]
            mx = bb_max[order[lo], k]
            for i in range(lo + 1, hi):
                if bb_min[order[i], k] < mn:
                    mn = bb_min[order[i], k]
                if bb_max[order[i], k] > mx:
                    mx = bb_max[order[i], k]
            node_min[node, k] = mn
            node_max[node, k] = mx
        if hi - lo <= _LEAF_SIZE:
            node_leaf[node] = True
            node_a[node] = lo
            node_b[node] = hi
            continue
        ext_x = node_max[node, 0] - node_min[node, 0]
        ext_y = node_max[node, 1] - node_min[node, 1]
        ext_z = node_max[node, 2] - node_min[node, 2]
        axis = 0
        if ext_y > ext_x:
            axis = 1
            ext_x = ext_y
        if ext_z > ext_x:
            axis = 2
        seg = order[lo:hi]
        vals = np.empty(hi - lo, dtype=np.float64)
        for i in range(hi - lo):
            vals[i] = cent[seg[i], axis]
        perm = np.argsort(vals, kind="mergesort")
        order[lo:hi] = seg[perm]
        mid = (lo + hi) // 2
        left = n_nodes
        right = n_nodes + 1
        n_nodes += 2
        node_leaf[node] = False
        node_a[node] = left
        node_b[node] = right
        stack_node[sp] = left
        stack_lo[sp] = lo
        stack_hi[sp] = mid
        sp += 1
        stack_node[sp] = right
        stack_lo[sp] = mid
        stack_hi[sp] = hi
        sp += 1
    return n_nodes


@njit(cache=True)
def _box_d2(node_min, node_max, node, px, py, pz):
    d2 = 0.0
    d = node_min[node, 0] - px
    if d > 0.0:
        d2 += d * d
    d = px - node_max[node, 0]
    if d > 0.0:
        d2 += d * d
    d = node_min[node, 1] - py
    if d > 0.0:
        d2 += d * d
    d = py - node_max[node, 1]
    if d > 0.0:
        d2 += d * d
    d = node_min[node, 2] - pz
    if d > 0.0:
        d2 += d * d
    d = pz - node_max[node, 2]
    if d > 0.0:
        d2 += d * d
    return d2


@njit(cache=True)
def _query_one(node_min, node_max, node_a, node_b, node_leaf, order,
               tv, is_points, px, py, pz):
    stack = np.empty(128, dtype=np.int64)
    stack[0] = 0
    sp = 1
    best = np.inf
    bx = 0.0; by = 0.0; bz = 0.0
    best_prim = -1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if _box_d2(node_min, node_max, node, px, py, pz) > best:
            continue
        if node_leaf[node]:
            for i in range(node_a[node], node_b[node]):
                prim = order[i]
                if is_points:
                    qx = tv[prim, 0, 0]
                    qy = tv[prim, 0, 1]
                    qz = tv[prim, 0, 2]
                else:
                    qx, qy, qz = _closest_on_triangle(
                        tv[prim, 0, 0], tv[prim, 0, 1], tv[prim, 0, 2],
                        tv[prim, 1, 0], tv[prim, 1, 1], tv[prim, 1, 2],
                        tv[prim, 2, 0], tv[prim, 2, 1], tv[prim, 2, 2],
                        px, py, pz)
                d2 = (qx - px) ** 2 + (qy - py) ** 2 + (qz - pz) ** 2
                if d2 < best or (d2 == best and prim < best_prim):
                    best = d2
                    bx = qx; by = qy; bz = qz
                    best_prim = prim
        else:
            a = node_a[node]
            b = node_b[node]
            da = _box_d2(node_min, node_max, a, px, py, pz)
            db = _box_d2(node_min, node_max, b, px, py, pz)
            if da > db:
                a, b = b, a
                da, db = db, da
            if db <= best:
                stack[sp] = b
                sp += 1
            if da <= best:
                stack[sp] = a
                sp += 1
    return bx, by, bz, best, best_prim


@njit(cache=True)
def _query_batch(node_min, node_max, node_a, node_b, node_leaf, order,
                 tv, is_points, queries, out_p, out_d2, out_prim):
    for i in range(queries.shape[0]):
        x, y, z, d2, prim = _query_one(node_min, node_max, node_a, node_b,
                                       node_leaf, order, tv, is_points,
                                       queries[i, 0], queries[i, 1], queries[i, 2])
        out_p[i, 0] = x
        out_p[i, 1] = y
        out_p[i, 2] = z
        out_d2[i] = d2
        out_prim[i] = prim


class NearestPointIndex:
    """Immutable AABB hierarchy; safe for concurrent queries."""

    def __init__(self, tri_verts, is_points, prim_ids):
        self.tri_verts = tri_verts      # (p,3,3); in point mode row 0 holds the point
        self.is_points = is_points
        self.prim_ids = prim_ids        # original primitive indices (degenerates skipped)
        self._inverse = None
        n = len(tri_verts)
        bb_min = tri_verts.min(axis=1)
        bb_max = tri_verts.max(axis=1)
        cent = tri_verts.mean(axis=1)
        cap = max(2 * (2 * n // _LEAF_SIZE + 2), 4)
        self.node_min = np.empty((cap, 3))
        self.node_max = np.empty((cap, 3))
        self.node_a = np.empty(cap, dtype=np.int64)
        self.node_b = np.empty(cap, dtype=np.int64)
        self.node_leaf = np.zeros(cap, dtype=np.bool_)
        self.order = np.arange(n, dtype=np.int64)
        k = _build_nodes(bb_min, bb_max, cent, self.order,
                         self.node_min, self.node_max,
                         self.node_a, self.node_b, self.node_leaf)
        self.node_min = self.node_min[:k].copy()
        self.node_max = self.node_max[:k].copy()
        self.node_a = self.node_a[:k].copy()
        self.node_b = self.node_b[:k].copy()
        self.node_leaf = self.node_leaf[:k].copy()

    def triangle(self, prim_id):
        """Vertices (3,3) of an original-index primitive kept in the tree."""
        if self._inverse is None:
            inv = np.full(int(self.prim_ids.max()) + 1, -1, dtype=np.int64)
            inv[self.prim_ids] = np.arange(len(self.prim_ids))
            self._inverse = inv
        row = self._inverse[int(prim_id)]
        if row < 0:
            raise KeyError(f"primitive {prim_id} not in index")
        return self.tri_verts[row]

    def query(self, points):
        """Batch nearest query -> (closest points, squared distances,
        original primitive indices)."""
        q = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        out_p = np.empty_like(q)
        out_d2 = np.empty(len(q))
        out_prim = np.empty(len(q), dtype=np.int64)
        _query_batch(self.node_min, self.node_max, self.node_a, self.node_b,
                     self.node_leaf, self.order, self.tri_verts,
                     self.is_points, q, out_p, out_d2, out_prim)
        return out_p, out_d2, self.prim_ids[out_prim]


def build_index(reference) -> NearestPointIndex:
    """Build the index over a TriangleSoup / half-edge mesh (triangles) or a
    PointCloud (points).  Degenerate triangles are excluded."""
    if isinstance(reference, PointCloud):
        pts = reference.points
        if len(pts) == 0:
            raise EmptyReference("empty point cloud")
        tv = np.zeros((len(pts), 3, 3))
        tv[:, 0, :] = pts
        tv[:, 1, :] = pts
        tv[:, 2, :] = pts
        return NearestPointIndex(np.ascontiguousarray(tv), True,
                                 np.arange(len(pts), dtype=np.int64))
    vertices = np.asarray(reference.vertices, dtype=np.float64)
    faces = np.asarray(reference.faces, dtype=np.int64)
    if len(faces) == 0:
        raise EmptyReference("reference has no faces")
    tv = vertices[faces]  # (m,3,3)
    cross = np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0])
    keep = np.einsum("ij,ij->i", cross, cross) > 0.0
    if not keep.any():
        raise EmptyReference("reference has only degenerate faces")
    prim_ids = np.nonzero(keep)[0].astype(np.int64)
    return NearestPointIndex(np.ascontiguousarray(tv[keep]), False, prim_ids)


def nearest_point(index: NearestPointIndex, q):
    """Exact nearest point on the reference to q -> (point, squared distance)."""
    p, d2, _ = index.query(np.asarray(q, dtype=np.float64).reshape(1, 3))
    return p[0], float(d2[0])

"""Adaptive occupancy octree over the normalized reference geometry.

The tree is stored as flat numpy arrays (one slot per node) so the hot
construction and connection passes can run under numba.  ``NodeView``
offers a conventional per-node object view on top of the arrays.

Conventions:
  * root volume is exactly [-1.1, 1.1]^3
  * child i (0-based) occupies octant bits (x, y, z) = (i & 1, i >> 1 & 1, i >> 2 & 1)
  * directions are 0:-x 1:+x 2:-y 3:+y 4:-z 5:+z
  * triangle/box intersection uses the closed-box convention: touching counts,
    so geometry lying exactly on a voxel boundary marks both voxels occupied
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from numba import njit

from .errors import DepthLimitInvalid
from .mesh_io import PointCloud, TriangleSoup

ROOT_MIN = -1.1
ROOT_SIDE = 2.2


class NodeStatus(IntEnum):
    EMPTY = 0
    OCCUPIED = 1
    EXTERIOR = 2


EMPTY, OCCUPIED, EXTERIOR = 0, 1, 2


@dataclass
class TriBoxQuery:
    triangle: np.ndarray  # (3,3)
    box_min: np.ndarray   # (3,)
    box_side: float


@njit(cache=True)
def _tri_box_overlap(cx, cy, cz, h, t0, t1, t2):
    """Separating-axis triangle/cube test, closed convention (13 axes)."""
    v0x = t0[0] - cx; v0y = t0[1] - cy; v0z = t0[2] - cz
    v1x = t1[0] - cx; v1y = t1[1] - cy; v1z = t1[2] - cz
    v2x = t2[0] - cx; v2y = t2[1] - cy; v2z = t2[2] - cz

    # box axes
    if min(v0x, v1x, v2x) > h or max(v0x, v1x, v2x) < -h:
        return False
    if min(v0y, v1y, v2y) > h or max(v0y, v1y, v2y) < -h:
        return False
    if min(v0z, v1z, v2z) > h or max(v0z, v1z, v2z) < -h:
        return False

    f0x = v1x - v0x; f0y = v1y - v0y; f0z = v1z - v0z
    f1x = v2x - v1x; f1y = v2y - v1y; f1z = v2z - v1z
    f2x = v0x - v2x; f2y = v0y - v2y; f2z = v0z - v2z

    # triangle normal axis
    nx = f0y * f1z - f0z * f1y
    ny = f0z * f1x - f0x * f1z
    nz = f0x * f1y - f0y * f1x
    d = nx * v0x + ny * v0y + nz * v0z
    r = h * (abs(nx) + abs(ny) + abs(nz))
    if d > r or d < -r:
        return False

    # cross products of box axes with triangle edges
    for ex, ey, ez in ((f0x, f0y, f0z), (f1x, f1y, f1z), (f2x, f2y, f2z)):
        # e cross with x-axis -> (0, -ez, ey)
        p0 = -ez * v0y + ey * v0z
        p1 = -ez * v1y + ey * v1z
        p2 = -ez * v2y + ey * v2z
        r = h * (abs(ez) + abs(ey))
        if min(p0, p1, p2) > r or max(p0, p1, p2) < -r:
            return False
        # with y-axis -> (ez, 0, -ex)
        p0 = ez * v0x - ex * v0z
        p1 = ez * v1x - ex * v1z
        p2 = ez * v2x - ex * v2z
        r = h * (abs(ez) + abs(ex))
        if min(p0, p1, p2) > r or max(p0, p1, p2) < -r:
            return False
        # with z-axis -> (-ey, ex, 0)
        p0 = -ey * v0x + ex * v0y
        p1 = -ey * v1x + ex * v1y
        p2 = -ey * v2x + ex * v2y
        r = h * (abs(ey) + abs(ex))
        if min(p0, p1, p2) > r or max(p0, p1, p2) < -r:
            return False
    return True


def tri_box_intersect(q: TriBoxQuery) -> bool:
    """True iff the (closed) triangle and (closed) cube intersect."""
    if q.box_side <= 0:
        raise ValueError("box side must be positive")
    tri = np.asarray(q.triangle, dtype=np.float64)
    mn = np.asarray(q.box_min, dtype=np.float64)
    h = q.box_side / 2.0
    return bool(_tri_box_overlap(mn[0] + h, mn[1] + h, mn[2] + h, h,
                                 tri[0], tri[1], tri[2]))


@njit(cache=True)
def _partition_faces(verts, faces, subset, mnx, mny, mnz, side, mask):
    """Test every face in ``subset`` against the 8 child cubes of the node box."""
    h = side / 4.0  # child half-side
    for j in range(subset.shape[0]):
        f = subset[j]
        t0 = verts[faces[f, 0]]
        t1 = verts[faces[f, 1]]
        t2 = verts[faces[f, 2]]
        for i in range(8):
            cx = mnx + side / 2.0 * (i & 1) + h
            cy = mny + side / 2.0 * ((i >> 1) & 1) + h
            cz = mnz + side / 2.0 * ((i >> 2) & 1) + h
            mask[i, j] = _tri_box_overlap(cx, cy, cz, h, t0, t1, t2)


@njit(cache=True)
def _partition_points(points, subset, mnx, mny, mnz, side, mask):
    half = side / 2.0
    for j in range(subset.shape[0]):
        p = points[subset[j]]
        for i in range(8):
            x0 = mnx + half * (i & 1)
            y0 = mny + half * ((i >> 1) & 1)
            z0 = mnz + half * ((i >> 2) & 1)
            mask[i, j] = (x0 <= p[0] <= x0 + half and
                          y0 <= p[1] <= y0 + half and
                          z0 <= p[2] <= z0 + half)


class Octree:
    """Flat-array octree; ``root`` exposes the node-object view."""

    def __init__(self, depth_limit):
        self.depth_limit = depth_limit
        self.level = None       # (n,) int8
        self.status = None      # (n,) int8
        self.coord = None       # (n,3) int32, min corner in units of the node's own level
        self.first_child = None  # (n,) int32, -1 for leaves
        self.face_start = None  # (n,) int64 into face_pool, -1 if none stored
        self.face_count = None  # (n,) int32
        self.face_pool = None   # (k,) int64 reference-face indices (occupied leaves)
        self.nbr_start = None   # (n,6) int64 into nbr_pool
        self.nbr_count = None   # (n,6) int32
        self.nbr_pool = None    # (e2,) int32
        self.sat_tests = 0      # instrumentation: triangle-box tests performed

    @property
    def n_nodes(self):
        return len(self.level)

    @property
    def root(self):
        return NodeView(self, 0)

    @property
    def leaf_side(self):
        return ROOT_SIDE / (1 << self.depth_limit)

    def node_box(self, idx):
        side = ROOT_SIDE / (1 << int(self.level[idx]))
        mn = ROOT_MIN + self.coord[idx].astype(np.float64) * side
        return mn, side

    def is_leaf(self, idx):
        return self.first_child[idx] < 0

    def leaves(self):
        return np.nonzero(self.first_child < 0)[0]

    def occupied_leaves(self):
        return np.nonzero((self.first_child < 0) & (self.status == OCCUPIED))[0]

    def fine_coord(self, idx):
        """Node min corner in units of the finest (depth H) grid."""
        shift = self.depth_limit - int(self.level[idx])
        return self.coord[idx].astype(np.int64) << shift

    def locate_leaf(self, point):
        """Leaf containing a point (closed boxes; ties resolve to the lower
        octant).  Returns -1 if the point is outside the root volume."""
        p = np.asarray(point, dtype=np.float64)
        if np.any(p < ROOT_MIN) or np.any(p > ROOT_MIN + ROOT_SIDE):
            return -1
        idx = 0
        while self.first_child[idx] >= 0:
            mn, side = self.node_box(idx)
            half = side / 2.0
            i = 0
            if p[0] >= mn[0] + half:
                i |= 1
            if p[1] >= mn[1] + half:
                i |= 2
            if p[2] >= mn[2] + half:
                i |= 4
            idx = int(self.first_child[idx]) + i
        return idx


class NodeView:
    """Read-only object view of one octree node."""

    __slots__ = ("tree", "index")

    def __init__(self, tree, index):
        self.tree = tree
        self.index = int(index)

    @property
    def level(self):
        return int(self.tree.level[self.index])

    @property
    def status(self):
        return NodeStatus(int(self.tree.status[self.index]))

    @property
    def volume(self):
        return self.tree.node_box(self.index)

    @property
    def is_leaf(self):
        return self.tree.is_leaf(self.index)

    @property
    def children(self):
        fc = int(self.tree.first_child[self.index])
        if fc < 0:
            return None
        return [NodeView(self.tree, fc + i) for i in range(8)]

    @property
    def face_triangles(self):
        s = int(self.tree.face_start[self.index])
        if s < 0:
            return np.empty(0, dtype=np.int64)
        c = int(self.tree.face_count[self.index])
        return self.tree.face_pool[s:s + c]

    @property
    def neighbor_groups(self):
        groups = []
        for d in range(6):
            s = int(self.tree.nbr_start[self.index, d])
            c = int(self.tree.nbr_count[self.index, d])
            groups.append([NodeView(self.tree, j) for j in self.tree.nbr_pool[s:s + c]])
        return groups

    def __repr__(self):
        return (f"NodeView(idx={self.index}, level={self.level}, "
                f"status={self.status.name})")


def construct_volume(reference, depth_limit) -> Octree:
    """Build the occupancy octree (recursive split of occupied nodes).

    ``reference`` is a TriangleSoup (mesh mode: a node is occupied iff some
    face intersects it) or a PointCloud (scan mode: occupied iff it contains
    a point).  All reference geometry must lie inside the root volume.
    """
    H = int(depth_limit)
    if H < 1 or H > 14:
        raise DepthLimitInvalid(f"depth limit {H} outside [1, 14]")

    if isinstance(reference, PointCloud):
        points = reference.points
        verts = faces = None
        n_prim = len(points)
        coords_all = points
    elif isinstance(reference, TriangleSoup):
        verts = np.ascontiguousarray(reference.vertices)
        faces = np.ascontiguousarray(reference.faces)
        points = None
        n_prim = len(faces)
        coords_all = verts
    else:
        raise TypeError("reference must be TriangleSoup or PointCloud")
    if len(coords_all) and float(np.abs(coords_all).max()) >= -ROOT_MIN:
        raise ValueError("reference geometry extends outside the root volume; normalize first")

    tree = Octree(H)
    level = [0]
    status = [OCCUPIED]  # root is occupied by definition, even for empty input
    coord = [(0, 0, 0)]
    first_child = [-1]
    face_start = [-1]
    face_count = [0]
    pool_chunks = []
    pool_len = 0
    sat_tests = 0

    root_subset = np.arange(n_prim, dtype=np.int64)
    stack = [(0, root_subset)]
    while stack:
        idx, subset = stack.pop()
        d = level[idx]
        if d == H:
            face_start[idx] = pool_len
            face_count[idx] = len(subset)
            pool_chunks.append(subset)
            pool_len += len(subset)
            continue
        base = len(level)
        first_child[idx] = base
        mn_side = ROOT_SIDE / (1 << d)
        mnx = ROOT_MIN + coord[idx][0] * mn_side
        mny = ROOT_MIN + coord[idx][1] * mn_side
        mnz = ROOT_MIN + coord[idx][2] * mn_side
        mask = np.zeros((8, len(subset)), dtype=np.bool_)
        if len(subset):
            if points is None:
                _partition_faces(verts, faces, subset, mnx, mny, mnz, mn_side, mask)
                sat_tests += 8 * len(subset)
            else:
                _partition_points(points, subset, mnx, mny, mnz, mn_side, mask)
        cx, cy, cz = coord[idx]
        for i in range(8):
            sub = subset[mask[i]]
            occ = len(sub) > 0
            level.append(d + 1)
            status.append(OCCUPIED if occ else EMPTY)
            coord.append((2 * cx + (i & 1), 2 * cy + ((i >> 1) & 1), 2 * cz + ((i >> 2) & 1)))
            first_child.append(-1)
            face_start.append(-1)
            face_count.append(0)
            if occ:
                stack.append((base + i, sub))

    tree.level = np.array(level, dtype=np.int8)
    tree.status = np.array(status, dtype=np.int8)
    tree.coord = np.array(coord, dtype=np.int32)
    tree.first_child = np.array(first_child, dtype=np.int32)
    tree.face_start = np.array(face_start, dtype=np.int64)
    tree.face_count = np.array(face_count, dtype=np.int32)
    tree.face_pool = (np.concatenate(pool_chunks) if pool_chunks
                      else np.empty(0, dtype=np.int64))
    tree.sat_tests = sat_tests
    return tree


@njit(cache=True)
def _collect_edges(first_child, edges_a, edges_b, edges_axis):
    # face-sharing child pairs along x, y, z for the spec child ordering
    pair_a = np.array([[0, 2, 4, 6], [0, 1, 4, 5], [0, 1, 2, 3]], dtype=np.int32)
    pair_b = np.array([[1, 3, 5, 7], [2, 3, 6, 7], [4, 5, 6, 7]], dtype=np.int32)
    # children of A on its +axis face / of B on its -axis face
    IA = np.array([[1, 3, 5, 7], [2, 3, 6, 7], [4, 5, 6, 7]], dtype=np.int32)
    IB = np.array([[0, 2, 4, 6], [0, 1, 4, 5], [0, 1, 2, 3]], dtype=np.int32)

    cap = edges_a.shape[0]
    n_edges = 0
    st_a = np.empty(4096, dtype=np.int64)
    st_b = np.empty(4096, dtype=np.int64)
    for node in range(first_child.shape[0]):
        fc = first_child[node]
        if fc < 0:
            continue
        for axis in range(3):
            for p in range(4):
                st_a[0] = fc + pair_a[axis, p]
                st_b[0] = fc + pair_b[axis, p]
                sp = 1
                while sp > 0:
                    sp -= 1
                    A = st_a[sp]
                    B = st_b[sp]
                    a_leaf = first_child[A] < 0
                    b_leaf = first_child[B] < 0
                    if a_leaf and b_leaf:
                        if n_edges >= cap:
                            return -1
                        edges_a[n_edges] = A
                        edges_b[n_edges] = B
                        edges_axis[n_edges] = axis
                        n_edges += 1
                    else:
                        for i in range(4):
                            st_a[sp] = A if a_leaf else first_child[A] + IA[axis, i]
                            st_b[sp] = B if b_leaf else first_child[B] + IB[axis, i]
                            sp += 1
    return n_edges


def connect_octree(tree: Octree):
    """Wire face-sharing leaf adjacency into six direction groups per node.

    Cross-resolution faces produce one edge per finer leaf.  The relation is
    symmetric: B in A's +axis group iff A in B's -axis group.
    """
    cap = max(64, 12 * tree.n_nodes)
    while True:
        edges_a = np.empty(cap, dtype=np.int64)
        edges_b = np.empty(cap, dtype=np.int64)
        edges_axis = np.empty(cap, dtype=np.int8)
        n = _collect_edges(tree.first_child, edges_a, edges_b, edges_axis)
        if n >= 0:
            break
        cap *= 2
    edges_a = edges_a[:n]
    edges_b = edges_b[:n]
    edges_axis = edges_axis[:n].astype(np.int64)

    # scatter both directions into per-(node, direction) CSR groups
    node_dir = np.concatenate([edges_a * 6 + (2 * edges_axis + 1),
                               edges_b * 6 + (2 * edges_axis)])
    other = np.concatenate([edges_b, edges_a]).astype(np.int32)
    order = np.argsort(node_dir, kind="stable")
    counts = np.bincount(node_dir, minlength=tree.n_nodes * 6)
    starts = np.zeros(tree.n_nodes * 6 + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    tree.nbr_pool = other[order]
    tree.nbr_start = starts[:-1].reshape(tree.n_nodes, 6)
    tree.nbr_count = counts.reshape(tree.n_nodes, 6).astype(np.int32)
    return tree


def boundary_leaves(tree: Octree):
    """Leaves with at least one empty neighbor group, i.e. leaves whose
    volume touches the root boundary.  Requires connections."""
    if tree.nbr_count is None:
        raise ValueError("connect_octree must run first")
    leaf = tree.first_child < 0
    has_empty_group = (tree.nbr_count == 0).any(axis=1)
    idx = np.nonzero(leaf & has_empty_group)[0]
    return [NodeView(tree, i) for i in idx]


def reset_exterior(tree: Octree):
    """Revert exterior labels (before a relabel after occupancy edits)."""
    tree.status[tree.status == EXTERIOR] = EMPTY


def cell_status(tree: Octree, cell):
    """Status of the leaf covering a finest-level cell; EXTERIOR for cells
    outside the grid."""
    n = 1 << tree.depth_limit
    cell = np.asarray(cell, dtype=np.int64)
    if np.any(cell < 0) or np.any(cell >= n):
        return EXTERIOR
    idx = 0
    d = 0
    while tree.first_child[idx] >= 0:
        shift = tree.depth_limit - d - 1
        i = (int((cell[0] >> shift) & 1) | (int((cell[1] >> shift) & 1) << 1)
             | (int((cell[2] >> shift) & 1) << 2))
        idx = int(tree.first_child[idx]) + i
        d += 1
    return int(tree.status[idx])


def _append_nodes(tree, levels, statuses, coords):
    k = len(levels)
    tree.level = np.concatenate([tree.level, np.array(levels, dtype=np.int8)])
    tree.status = np.concatenate([tree.status, np.array(statuses, dtype=np.int8)])
    tree.coord = np.concatenate([tree.coord, np.array(coords, dtype=np.int32)])
    tree.first_child = np.concatenate([tree.first_child, np.full(k, -1, dtype=np.int32)])
    tree.face_start = np.concatenate([tree.face_start, np.full(k, -1, dtype=np.int64)])
    tree.face_count = np.concatenate([tree.face_count, np.zeros(k, dtype=np.int32)])


def fill_cell(tree: Octree, cell):
    """Force one finest-level cell to Occupied (with an empty face list),
    splitting any coarser empty leaf on the way down.  Used to dissolve
    pinched fold configurations; invalidates connections and exterior labels.
    """
    H = tree.depth_limit
    cell = np.asarray(cell, dtype=np.int64)
    idx = 0
    for d in range(H):
        if tree.first_child[idx] < 0:
            base = tree.n_nodes
            cx, cy, cz = (int(c) for c in tree.coord[idx])
            _append_nodes(
                tree,
                [d + 1] * 8,
                [EMPTY] * 8,
                [(2 * cx + (i & 1), 2 * cy + ((i >> 1) & 1), 2 * cz + ((i >> 2) & 1))
                 for i in range(8)],
            )
            tree.first_child[idx] = base
        tree.status[idx] = OCCUPIED
        shift = H - d - 1
        i = (int((cell[0] >> shift) & 1) | (int((cell[1] >> shift) & 1) << 1)
             | (int((cell[2] >> shift) & 1) << 2))
        idx = int(tree.first_child[idx]) + i
    tree.status[idx] = OCCUPIED
    tree.nbr_start = None
    tree.nbr_count = None
    tree.nbr_pool = None

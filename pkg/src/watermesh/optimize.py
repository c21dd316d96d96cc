"""Projection of the extracted mesh onto the reference surface.

Per-vertex Gauss-Seidel scheme: each position update minimizes the squared
distance to the vertex's nearest reference point subject to linear
inversion-free constraints (the face normal of every incident triangle,
which is linear in the moving vertex, must keep a positive dot product
with the three vertex normals involved).  Each normal update projects the
area-weighted average normal onto its feasibility polyhedron and
normalizes the result, which is the global optimum of the unit-constrained
problem.

Both subproblems reduce to projecting a target point onto an intersection
of halfspaces; ``solve_projection_qp`` walks from a feasible start toward
the target, activating blocking halfspaces and dropping ones whose
multiplier turns negative, so the result is the exact projection.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import InfeasibleInit, NonConvergenceWarning
from .extract import HalfEdgeMesh
from .spatial import NearestPointIndex, _query_one

logger = logging.getLogger(__name__)

EPS_V = 1e-5    # position-update constraint threshold
EPS_N = 1e-2    # normal-update constraint threshold
MOVE_TOL = 1e-7  # displacement below which a vertex counts as not updated


@dataclass
class ConvexQP:
    """minimize ||x - target||^2 subject to normals[i] . x >= offsets[i]."""

    target: np.ndarray
    normals: np.ndarray
    offsets: np.ndarray


@njit(cache=True)
def _qp_solve(t, A, b, x0):
    """Exact projection of ``t`` onto {x : A x >= b} from feasible ``x0``.

    Active-set walk: move toward the target projected onto the current
    active constraints, stop at the first blocking halfspace and activate
    it, drop active constraints whose multiplier goes negative.  Working
    set never exceeds rank 3.
    """
    m = A.shape[0]
    x = x0.copy()
    if m == 0:
        return t.copy()
    # guard against float-noise (or deliberately relaxed) starts: a row the
    # start already violates is shifted to pass through the start, so the
    # walk never worsens it
    b = b.copy()
    for j in range(m):
        v = A[j, 0] * x[0] + A[j, 1] * x[1] + A[j, 2] * x[2]
        if v < b[j]:
            b[j] = v
    W = np.full(3, -1, dtype=np.int64)
    nw = 0
    in_w = np.zeros(m, dtype=np.bool_)
    max_iter = 6 * m + 16
    for _ in range(max_iter):
        # projection of t onto the active affine subspace
        if nw == 0:
            xeq = t.copy()
            mu = np.zeros(0)
        else:
            Aw = np.empty((nw, 3))
            rhs = np.empty(nw)
            for i in range(nw):
                Aw[i] = A[W[i]]
                rhs[i] = Aw[i, 0] * t[0] + Aw[i, 1] * t[1] + Aw[i, 2] * t[2] - b[W[i]]
            G = Aw @ Aw.T
            mu = np.linalg.lstsq(G, rhs)[0]
            xeq = t - Aw.T @ mu
        d = xeq - x
        d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
        if d2 <= 1e-26:
            # at the subspace optimum; multipliers are lambda = -mu
            if nw == 0:
                return x
            worst = -1
            worst_val = -1e-12
            for i in range(nw):
                if -mu[i] < worst_val:
                    worst_val = -mu[i]
                    worst = i
            if worst < 0:
                return x
            in_w[W[worst]] = False
            W[worst] = W[nw - 1]
            nw -= 1
            continue
        alpha = 1.0
        blocker = -1
        for j in range(m):
            if in_w[j]:
                continue
            ad = A[j, 0] * d[0] + A[j, 1] * d[1] + A[j, 2] * d[2]
            if ad >= -1e-300:
                continue
            r = (b[j] - (A[j, 0] * x[0] + A[j, 1] * x[1] + A[j, 2] * x[2])) / ad
            if r < alpha:
                alpha = r
                blocker = j
        if alpha < 0.0:
            alpha = 0.0
        x = x + alpha * d
        if blocker < 0:
            x = xeq
            continue
        if nw < 3:
            W[nw] = blocker
            in_w[blocker] = True
            nw += 1
        else:
            # degenerate vertex contact: exchange against the weakest multiplier
            worst = 0
            worst_val = -mu[0]
            for i in range(1, nw):
                if -mu[i] < worst_val:
                    worst_val = -mu[i]
                    worst = i
            in_w[W[worst]] = False
            W[worst] = blocker
            in_w[blocker] = True
    return x


def solve_projection_qp(qp: ConvexQP, start) -> np.ndarray:
    """Exact minimizer of ||x - target||^2 over the halfspace intersection.

    ``start`` must be feasible; the walk activates each blocking constraint
    as it is reached and terminates at the target's projection (or a corner
    when three constraints pin the point).
    """
    A = np.ascontiguousarray(qp.normals, dtype=np.float64).reshape(-1, 3)
    b = np.ascontiguousarray(qp.offsets, dtype=np.float64).reshape(-1)
    x0 = np.asarray(start, dtype=np.float64).reshape(3)
    t = np.asarray(qp.target, dtype=np.float64).reshape(3)
    if len(A) and np.min(A @ x0 - b) < -1e-9:
        raise ValueError("start point violates the constraints")
    return _qp_solve(t, A, b, x0)


def max_margin_normal(face_normals):
    """Direction maximizing the least dot product with the given unit face
    normals -> (direction, margin).  margin <= 0 means no single normal is
    consistent with every face (the orientation cone is empty)."""
    from scipy.optimize import linprog

    U = np.asarray(face_normals, dtype=np.float64).reshape(-1, 3)
    if len(U) == 0:
        return np.array([0.0, 0.0, 1.0]), 1.0
    # max t  s.t.  U n >= t,  n in [-1, 1]^3
    A_ub = np.hstack([-U, np.ones((len(U), 1))])
    res = linprog(c=[0.0, 0.0, 0.0, -1.0], A_ub=A_ub, b_ub=np.zeros(len(U)),
                  bounds=[(-1, 1)] * 3 + [(None, 2.0)], method="highs")
    if not res.success:
        return np.array([0.0, 0.0, 1.0]), -1.0
    n = res.x[:3]
    nn = np.linalg.norm(n)
    if nn < 1e-12:
        return np.array([0.0, 0.0, 1.0]), float(res.x[3])
    n = n / nn
    return n, float((U @ n).min())


@dataclass
class OptimState:
    """Mutable optimizer variables bound to one extracted mesh."""

    mesh: HalfEdgeMesh
    positions: np.ndarray
    normals: np.ndarray
    v2f_off: np.ndarray
    v2f_face: np.ndarray
    eps_v: float = EPS_V
    eps_n: float = EPS_N
    move_tol: float = MOVE_TOL
    active: np.ndarray = None
    update_counter: int = 0
    degenerate_normals: int = 0
    passes_run: int = 0

    def energies(self, index: NearestPointIndex, ids=None):
        """E_D (squared distance to the reference) per requested vertex."""
        pts = self.positions if ids is None else self.positions[ids]
        _, d2, _ = index.query(pts)
        return d2


def init_state(mesh: HalfEdgeMesh, strict: bool = True) -> OptimState:
    """Initialize positions from extraction and normals from the normalized
    sum of incident face cross products; verify every inversion-free
    constraint already holds.

    A vertex whose averaged normal misses the eps_v margin falls back to
    the max-margin direction of its face-normal cone.  InfeasibleInit is
    raised (``strict``) only when some vertex has an empty cone, i.e. the
    extraction delivered a genuinely fold-pinched star.
    """
    positions = mesh.vertices.copy()
    nrm, mags = mesh.vertex_normals()
    used = np.bincount(mesh.faces.reshape(-1), minlength=mesh.n_vertices) > 0
    v2f_off, v2f_face = mesh.vertex_face_csr()
    state = OptimState(mesh=mesh, positions=positions, normals=nrm,
                       v2f_off=v2f_off, v2f_face=v2f_face)
    state.active = used.copy()

    cross = mesh.face_cross_normals()
    bad_vertices = set(np.nonzero(used & (mags < 1e-12))[0].tolist())
    for s in range(3):
        dots = np.einsum("ij,ij->i", cross, nrm[mesh.faces[:, s]])
        for f in np.nonzero(dots < state.eps_v - 1e-12)[0]:
            bad_vertices.add(int(mesh.faces[f, s]))
    infeasible = 0
    for v in sorted(bad_vertices):
        fs = v2f_face[v2f_off[v]:v2f_off[v + 1]]
        unit = cross[fs]
        norms = np.linalg.norm(unit, axis=1)
        unit = unit[norms > 0] / norms[norms > 0, None]
        witness, margin = max_margin_normal(unit)
        if margin <= 1e-12:
            infeasible += 1
            continue
        nrm[v] = witness
        worst = float(np.min(cross[fs] @ witness))
        if worst < state.eps_v - 1e-12:
            logger.debug("vertex %d init margin %.3e below eps_v", v, worst)
    if infeasible:
        msg = f"{infeasible} vertices have no orientation-consistent normal at init"
        if strict:
            raise InfeasibleInit(msg)
        logger.warning(msg)
    return state


@njit(cache=True)
def _vertex_constraints(k, pos, nrm, faces, v2f_off, v2f_face, eps_v, A, b):
    """Rows: (v_a - v_b) x n_i . x >= eps_v - (v_a x v_b) . n_i for every
    incident triangle (k,a,b) and i in {k,a,b}; the face normal is linear
    in the moving position x."""
    ci = 0
    for fi in range(v2f_off[k], v2f_off[k + 1]):
        f = v2f_face[fi]
        s = 0
        if faces[f, 1] == k:
            s = 1
        elif faces[f, 2] == k:
            s = 2
        a = faces[f, (s + 1) % 3]
        bb = faces[f, (s + 2) % 3]
        wax = pos[a, 0] - pos[bb, 0]
        way = pos[a, 1] - pos[bb, 1]
        waz = pos[a, 2] - pos[bb, 2]
        cx = pos[a, 1] * pos[bb, 2] - pos[a, 2] * pos[bb, 1]
        cy = pos[a, 2] * pos[bb, 0] - pos[a, 0] * pos[bb, 2]
        cz = pos[a, 0] * pos[bb, 1] - pos[a, 1] * pos[bb, 0]
        for which in range(3):
            if which == 0:
                v = k
            elif which == 1:
                v = a
            else:
                v = bb
            nx = nrm[v, 0]
            ny = nrm[v, 1]
            nz = nrm[v, 2]
            A[ci, 0] = way * nz - waz * ny
            A[ci, 1] = waz * nx - wax * nz
            A[ci, 2] = wax * ny - way * nx
            b[ci] = eps_v - (cx * nx + cy * ny + cz * nz)
            ci += 1
    return ci


@njit(cache=True)
def _do_vertex_update(k, tx, ty, tz, pos, nrm, faces, v2f_off, v2f_face,
                      eps_v, move_tol):
    nc = 3 * (v2f_off[k + 1] - v2f_off[k])
    A = np.empty((nc, 3))
    b = np.empty(nc)
    _vertex_constraints(k, pos, nrm, faces, v2f_off, v2f_face, eps_v, A, b)
    t = np.empty(3)
    t[0] = tx
    t[1] = ty
    t[2] = tz
    x = _qp_solve(t, A, b, pos[k].copy())
    dx = x[0] - pos[k, 0]
    dy = x[1] - pos[k, 1]
    dz = x[2] - pos[k, 2]
    pos[k, 0] = x[0]
    pos[k, 1] = x[1]
    pos[k, 2] = x[2]
    return dx * dx + dy * dy + dz * dz > move_tol * move_tol


@njit(cache=True)
def _do_normal_update(k, pos, nrm, faces, v2f_off, v2f_face, eps_n, move_tol):
    """Returns 1 if the normal changed, 0 if not, -1 on a degenerate skip."""
    nc = v2f_off[k + 1] - v2f_off[k]
    if nc == 0:
        return 0
    A = np.empty((nc, 3))
    b = np.full(nc, eps_n)
    sx = 0.0
    sy = 0.0
    sz = 0.0
    for i in range(nc):
        f = v2f_face[v2f_off[k] + i]
        ax = pos[faces[f, 1], 0] - pos[faces[f, 0], 0]
        ay = pos[faces[f, 1], 1] - pos[faces[f, 0], 1]
        az = pos[faces[f, 1], 2] - pos[faces[f, 0], 2]
        bx = pos[faces[f, 2], 0] - pos[faces[f, 0], 0]
        by = pos[faces[f, 2], 1] - pos[faces[f, 0], 1]
        bz = pos[faces[f, 2], 2] - pos[faces[f, 0], 2]
        A[i, 0] = ay * bz - az * by
        A[i, 1] = az * bx - ax * bz
        A[i, 2] = ax * by - ay * bx
        sx += A[i, 0]
        sy += A[i, 1]
        sz += A[i, 2]
    sn = np.sqrt(sx * sx + sy * sy + sz * sz)
    if sn < 1e-12:
        return -1
    tilde = np.empty(3)
    tilde[0] = sx / sn
    tilde[1] = sy / sn
    tilde[2] = sz / sn
    feasible = True
    for i in range(nc):
        if A[i, 0] * tilde[0] + A[i, 1] * tilde[1] + A[i, 2] * tilde[2] < eps_n:
            feasible = False
            break
    if feasible:
        nhat = tilde
    else:
        # scale the current normal out to a feasible start (margins are
        # >= eps_v > 0 by the position-update invariant)
        c = 1.0
        for i in range(nc):
            margin = (A[i, 0] * nrm[k, 0] + A[i, 1] * nrm[k, 1]
                      + A[i, 2] * nrm[k, 2])
            if margin <= 0.0:
                return -1
            need = eps_n / margin
            if need > c:
                c = need
        x0 = np.empty(3)
        x0[0] = c * nrm[k, 0]
        x0[1] = c * nrm[k, 1]
        x0[2] = c * nrm[k, 2]
        nhat = _qp_solve(tilde, A, b, x0)
    hn = np.sqrt(nhat[0] ** 2 + nhat[1] ** 2 + nhat[2] ** 2)
    if hn < 1e-12:
        return -1
    nx = nhat[0] / hn
    ny = nhat[1] / hn
    nz = nhat[2] / hn
    changed = ((nx - nrm[k, 0]) ** 2 + (ny - nrm[k, 1]) ** 2
               + (nz - nrm[k, 2]) ** 2) > move_tol * move_tol
    nrm[k, 0] = nx
    nrm[k, 1] = ny
    nrm[k, 2] = nz
    return 1 if changed else 0


@njit(cache=True)
def _gs_pass(order, pos, nrm, faces, v2f_off, v2f_face,
             node_min, node_max, node_a, node_b, node_leaf, tri_order, tv,
             is_points, eps_v, eps_n, move_tol, active_next):
    accepted = 0
    degenerate = 0
    for ii in range(order.shape[0]):
        k = order[ii]
        px, py, pz, _, _ = _query_one(node_min, node_max, node_a, node_b,
                                      node_leaf, tri_order, tv, is_points,
                                      pos[k, 0], pos[k, 1], pos[k, 2])
        moved = _do_vertex_update(k, px, py, pz, pos, nrm, faces,
                                  v2f_off, v2f_face, eps_v, move_tol)
        res = _do_normal_update(k, pos, nrm, faces, v2f_off, v2f_face,
                                eps_n, move_tol)
        if res < 0:
            degenerate += 1
        if moved:
            accepted += 1
            active_next[k] = True
            for fi in range(v2f_off[k], v2f_off[k + 1]):
                f = v2f_face[fi]
                active_next[faces[f, 0]] = True
                active_next[faces[f, 1]] = True
                active_next[faces[f, 2]] = True
    return accepted, degenerate


def update_vertex(state: OptimState, k: int, index: NearestPointIndex,
                  target=None) -> bool:
    """Constrained projection of vertex k toward its nearest reference point
    (or an explicit ``target``).  Returns True iff the vertex moved more
    than the movement tolerance."""
    if target is None:
        p, _, _ = index.query(state.positions[k])
        target = p[0]
    t = np.asarray(target, dtype=np.float64)
    return bool(_do_vertex_update(int(k), t[0], t[1], t[2], state.positions,
                                  state.normals, state.mesh.faces,
                                  state.v2f_off, state.v2f_face,
                                  state.eps_v, state.move_tol))


def update_normal(state: OptimState, k: int) -> bool:
    """Project the averaged normal onto the feasibility polyhedron (relaxed
    problem) and normalize; returns True iff the normal changed."""
    res = _do_normal_update(int(k), state.positions, state.normals,
                            state.mesh.faces, state.v2f_off, state.v2f_face,
                            state.eps_n, state.move_tol)
    if res < 0:
        state.degenerate_normals += 1
        logger.debug("degenerate normal at vertex %d skipped", k)
    return res == 1


def gauss_seidel(state: OptimState, index: NearestPointIndex,
                 max_passes: int = 50, progress=None) -> OptimState:
    """Run active-list Gauss-Seidel passes until no vertex moves.

    Each pass visits active vertices in decreasing E_D order, re-querying
    the nearest reference point per update.  A moved vertex reactivates
    itself and its one-ring for the next pass.
    """
    faces = state.mesh.faces
    for p in range(max_passes):
        ids = np.nonzero(state.active)[0]
        if len(ids) == 0:
            break
        e = state.energies(index, ids)
        order = ids[np.argsort(-e, kind="stable")]
        active_next = np.zeros(len(state.positions), dtype=np.bool_)
        accepted, degenerate = _gs_pass(
            order, state.positions, state.normals, faces,
            state.v2f_off, state.v2f_face,
            index.node_min, index.node_max, index.node_a, index.node_b,
            index.node_leaf, index.order, index.tri_verts, index.is_points,
            state.eps_v, state.eps_n, state.move_tol, active_next)
        state.update_counter += accepted
        state.degenerate_normals += degenerate
        state.passes_run = p + 1
        if progress is not None:
            progress(p, len(ids), float(e.max()) if len(e) else 0.0)
        state.active = active_next
        if accepted == 0:
            break
    if state.active.any():
        warnings.warn(
            f"optimizer hit the pass cap with {int(state.active.sum())} active vertices",
            NonConvergenceWarning)
    return state


def check_state_invariants(state: OptimState):
    """Debug helper: every face cross normal keeps dot >= eps_v with its
    three vertex normals, and vertex normals are unit length."""
    mesh = state.mesh
    v = state.positions
    f = mesh.faces
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    ok = True
    for s in range(3):
        dots = np.einsum("ij,ij->i", cross, state.normals[f[:, s]])
        ok &= bool(np.all(dots >= state.eps_v - 1e-9))
    used = np.bincount(f.reshape(-1), minlength=len(v)) > 0
    norms = np.linalg.norm(state.normals[used], axis=1)
    ok &= bool(np.all(np.abs(norms - 1.0) < 1e-9))
    return ok

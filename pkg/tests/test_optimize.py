import numpy as np
import pytest

import shapes
from qp_oracle import projection_oracle, random_instance
from watermesh import mesh_io
from watermesh.extract import extract_manifold
from watermesh.octree import connect_octree, construct_volume
from watermesh.optimize import (EPS_N, EPS_V, ConvexQP, OptimState,
                                check_state_invariants, gauss_seidel, init_state,
                                max_margin_normal, solve_projection_qp,
                                update_normal, update_vertex)
from watermesh.spatial import build_index


def build_state(soup, H=4):
    tree = construct_volume(soup, H)
    connect_octree(tree)
    mesh = extract_manifold(tree)
    return tree, mesh, init_state(mesh), build_index(soup)


def normalized(soup):
    return mesh_io.normalize(soup)[0]


# --- solve_projection_qp ------------------------------------------------------

def test_qp_no_constraints_returns_target():
    qp = ConvexQP(np.array([1.0, 2.0, 3.0]), np.zeros((0, 3)), np.zeros(0))
    x = solve_projection_qp(qp, np.zeros(3))
    assert np.allclose(x, [1, 2, 3])


def test_qp_single_halfspace():
    qp = ConvexQP(np.array([-1.0, 0.0, 0.0]),
                  np.array([[1.0, 0.0, 0.0]]), np.array([0.0]))
    x = solve_projection_qp(qp, np.array([1.0, 0.0, 0.0]))
    assert np.allclose(x, [0, 0, 0], atol=1e-12)


def test_qp_feasible_target_reached():
    qp = ConvexQP(np.array([0.5, 0.5, 0.5]),
                  np.array([[1.0, 0.0, 0.0]]), np.array([0.0]))
    x = solve_projection_qp(qp, np.array([1.0, 1.0, 1.0]))
    assert np.allclose(x, [0.5, 0.5, 0.5])


def test_qp_corner_case():
    A = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    b = np.zeros(3)
    qp = ConvexQP(np.array([-1.0, -2.0, -3.0]), A, b)
    x = solve_projection_qp(qp, np.ones(3))
    assert np.allclose(x, [0, 0, 0], atol=1e-12)


def test_qp_drop_needed_for_optimality():
    # greedy no-drop walks fail here: the first-hit constraint has a negative
    # multiplier at the corner and must be released
    A = np.array([[0.0, 1.0, 0.0], [1.0, 2.0, 0.0]])
    b = np.zeros(2)
    t = np.array([-3.0, -1.0, 0.0])
    x = solve_projection_qp(ConvexQP(t, A, b), np.array([5.0, 0.1, 0.0]))
    expect = projection_oracle(t, A, b)
    assert np.linalg.norm(x - expect) < 1e-9
    assert np.linalg.norm(x - np.array([-2.0, 1.0, 0.0])) < 1e-9


def test_qp_matches_oracle_randomized(rng):
    for k in range(300):
        m = int(rng.integers(0, 12))
        t, A, b, x0 = random_instance(rng, m)
        x = solve_projection_qp(ConvexQP(t, A, b), x0)
        xo = projection_oracle(t, A, b)
        assert np.linalg.norm(x - xo) < 1e-6


def test_qp_monotone_projection_property(rng):
    # result is never farther from target than the feasible start
    for _ in range(100):
        m = int(rng.integers(1, 10))
        t, A, b, x0 = random_instance(rng, m)
        x = solve_projection_qp(ConvexQP(t, A, b), x0)
        assert ((x - t) ** 2).sum() <= ((x0 - t) ** 2).sum() + 1e-12


def test_qp_result_feasible(rng):
    for _ in range(100):
        m = int(rng.integers(1, 14))
        t, A, b, x0 = random_instance(rng, m)
        x = solve_projection_qp(ConvexQP(t, A, b), x0)
        assert np.min(A @ x - b) > -1e-9


def test_qp_rejects_infeasible_start():
    qp = ConvexQP(np.zeros(3), np.array([[1.0, 0, 0]]), np.array([1.0]))
    with pytest.raises(ValueError):
        solve_projection_qp(qp, np.zeros(3))


# --- init_state ---------------------------------------------------------------

def test_init_cube_corner_normals():
    soup = normalized(shapes.cube())
    tree, mesh, state, index = build_state(soup)
    cross = mesh.face_cross_normals()
    for s in range(3):
        dots = np.einsum("ij,ij->i", cross, state.normals[mesh.faces[:, s]])
        assert (dots >= EPS_V - 1e-12).all()
    norms = np.linalg.norm(state.normals, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-9)


def test_init_flat_region_normals_match_plane():
    soup = shapes.sheet(n=3, size=0.8, z=0.013)
    tree, mesh, state, index = build_state(soup)
    # vertices well inside the top of the slab have a pure +z normal
    top = mesh.vertices[:, 2].max()
    interior = ((np.abs(mesh.vertices[:, 0]) < 0.4)
                & (np.abs(mesh.vertices[:, 1]) < 0.4)
                & np.isclose(mesh.vertices[:, 2], top))
    assert interior.any()
    assert np.allclose(state.normals[interior], [0, 0, 1], atol=1e-12)


def test_init_sheet_opposite_sides_opposite_normals():
    soup = shapes.sheet(n=3, size=0.8, z=0.013)
    tree, mesh, state, index = build_state(soup)
    top = mesh.vertices[:, 2].max()
    bot = mesh.vertices[:, 2].min()
    interior = (np.abs(mesh.vertices[:, 0]) < 0.4) & (np.abs(mesh.vertices[:, 1]) < 0.4)
    t_mask = interior & np.isclose(mesh.vertices[:, 2], top)
    b_mask = interior & np.isclose(mesh.vertices[:, 2], bot)
    assert np.allclose(state.normals[t_mask], [0, 0, 1], atol=1e-12)
    assert np.allclose(state.normals[b_mask], [0, 0, -1], atol=1e-12)


def test_init_active_list_covers_all_used_vertices():
    soup = normalized(shapes.cube())
    tree, mesh, state, index = build_state(soup)
    assert state.active.sum() == mesh.n_vertices


# --- update_vertex ------------------------------------------------------------

def test_update_vertex_fixed_point_returns_false():
    soup = normalized(shapes.cube())
    tree, mesh, state, index = build_state(soup)
    gauss_seidel(state, index)
    k = int(np.argmax(np.abs(state.positions[:, 0])))
    assert update_vertex(state, k, index) is False


def test_update_vertex_plane_offset_moves_exactly_delta():
    soup = shapes.sheet(n=3, size=0.8, z=0.013)
    tree, mesh, state, index = build_state(soup)
    top = mesh.vertices[:, 2].max()
    interior = ((np.abs(mesh.vertices[:, 0]) < 0.4)
                & (np.abs(mesh.vertices[:, 1]) < 0.4)
                & np.isclose(mesh.vertices[:, 2], top))
    k = int(np.nonzero(interior)[0][0])
    delta = top - 0.013
    moved = update_vertex(state, k, index)
    assert moved
    assert np.isclose(state.positions[k, 2], 0.013, atol=1e-12)
    assert np.isclose(np.linalg.norm(state.positions[k] - mesh.vertices[k]), delta)


def test_update_vertex_respects_constraints_under_adversarial_target():
    soup = normalized(shapes.cube())
    tree, mesh, state, index = build_state(soup)
    k = 0
    # target deep inside the volume: full motion would crush incident faces
    update_vertex(state, k, index, target=np.array([0.0, 0.0, 0.0]))
    cross = mesh_cross(state)
    for s in range(3):
        dots = np.einsum("ij,ij->i", cross, state.normals[state.mesh.faces[:, s]])
        assert (dots >= EPS_V - 1e-9).all()


def mesh_cross(state):
    v = state.positions
    f = state.mesh.faces
    return np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])


# --- update_normal ------------------------------------------------------------

def test_update_normal_flat_patch_unchanged():
    soup = shapes.sheet(n=3, size=0.8, z=0.013)
    tree, mesh, state, index = build_state(soup)
    top = mesh.vertices[:, 2].max()
    interior = ((np.abs(mesh.vertices[:, 0]) < 0.4)
                & (np.abs(mesh.vertices[:, 1]) < 0.4)
                & np.isclose(mesh.vertices[:, 2], top))
    k = int(np.nonzero(interior)[0][0])
    changed = update_normal(state, k)
    assert changed is False
    assert np.allclose(state.normals[k], [0, 0, 1], atol=1e-12)


def test_update_normal_keeps_unit_length():
    soup = normalized(shapes.rotated(shapes.cube()))
    tree, mesh, state, index = build_state(soup)
    for k in range(0, mesh.n_vertices, 50):
        update_normal(state, k)
    norms = np.linalg.norm(state.normals, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-9)


def theorem1_instance(rng, m=6):
    """Random feasible cone + operational target.

    The target is a normalized positive combination of the star normals --
    exactly how the averaged normal arises in the solver.  (For arbitrary
    antipodal targets the normalize-the-relaxed-optimum identity breaks
    down: the eps_n offsets make the feasible set a truncated cone, not a
    cone, and a target pointing away from it can project near the origin.)
    """
    u = rng.normal(size=3)
    u /= np.linalg.norm(u)
    normals = []
    for _ in range(m):
        while True:
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            if d @ u > 0.5:  # within 60 degrees
                break
        normals.append(d * rng.uniform(0.5, 2.0))
    A = np.array(normals)
    w = rng.uniform(0.05, 1.0, m)
    tilde = (w[:, None] * A).sum(0)
    tilde /= np.linalg.norm(tilde)
    return u, A, tilde


def relaxed_normal_optimum(u, A, tilde):
    """The normal-update computation: project the averaged normal onto the
    eps_n polyhedron (scaled feasible start) and normalize."""
    b = np.full(len(A), EPS_N)
    if np.min(A @ tilde - b) >= 0:
        nhat = tilde
    else:
        margins = A @ u
        c = max(1.0, float(np.max(b / margins)))
        nhat = solve_projection_qp(ConvexQP(tilde, A, b), c * u)
    return nhat / np.linalg.norm(nhat)


def test_theorem1_dominance_sampled(rng):
    for _ in range(50):
        u, A, tilde = theorem1_instance(rng)
        n_star = relaxed_normal_optimum(u, A, tilde)
        # rejection-sample feasible unit vectors near the cone axis
        samples = rng.normal(size=(4000, 3))
        samples /= np.linalg.norm(samples, axis=1, keepdims=True)
        feas = samples[(A @ samples.T >= EPS_N).all(axis=0)]
        assert len(feas) > 10
        d_star = np.linalg.norm(n_star - tilde)
        d_samp = np.linalg.norm(feas - tilde, axis=1)
        assert (d_star <= d_samp + 1e-9).all()


def test_theorem1_zero_energy_branch(rng):
    # feasible averaged normal is returned untouched
    u, A, _ = theorem1_instance(rng)
    n = relaxed_normal_optimum(u, A, u)
    if np.min(A @ u) >= EPS_N:
        assert np.allclose(n, u)


# --- gauss_seidel ---------------------------------------------------------------

def test_gauss_seidel_self_reference_fixed_point():
    soup = normalized(shapes.cube())
    tree, mesh, state, index = build_state(soup)
    gauss_seidel(state, index)
    mesh.vertices[:] = state.positions
    # re-optimizing against the already-fitted result moves nothing
    state2 = init_state(mesh)
    idx2 = build_index(mesh)
    gauss_seidel(state2, idx2, max_passes=5)
    assert state2.update_counter == 0
    assert state2.passes_run == 1


def test_gauss_seidel_voxel_sphere_lands_on_reference():
    soup = normalized(shapes.icosphere(3))
    tree, mesh, state, index = build_state(soup, H=5)
    gauss_seidel(state, index)
    d2 = state.energies(index)
    assert np.sqrt(d2.max()) < 1e-6
    # analytic sphere oracle: every vertex within the tessellation's sagitta
    r = 0.9
    tv = soup.vertices[soup.faces]
    nrm = np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0])
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    plane_d = np.abs(np.einsum("ij,ij->i", nrm, tv[:, 0]))
    sagitta = float((r - plane_d).max())
    radial = np.abs(np.linalg.norm(state.positions, axis=1) - r)
    assert radial.max() <= sagitta + 1e-9


def test_gauss_seidel_update_budget():
    soup = normalized(shapes.icosphere(3))
    tree, mesh, state, index = build_state(soup, H=5)
    gauss_seidel(state, index)
    assert state.update_counter <= 10 * mesh.n_faces


def test_gauss_seidel_invariants_after_run():
    soup = normalized(shapes.rotated(shapes.cube()))
    tree, mesh, state, index = build_state(soup, H=5)
    gauss_seidel(state, index)
    assert check_state_invariants(state)


def test_gauss_seidel_thin_wedge_terminates():
    # adversarial nearly-degenerate wedge: two sheets meeting at 4 degrees
    n = 12
    xs = np.linspace(-0.8, 0.8, n + 1)
    ang = np.radians(4.0)
    rows = []
    for x in xs:
        rows.append([x, 0.0, 0.0])
    base = shapes.sheet(n=n, size=0.8, z=0.0)
    top = shapes.sheet(n=n, size=0.8, z=0.0)
    tv = top.vertices.copy()
    tv[:, 2] = (tv[:, 1] + 0.8) * np.tan(ang)
    wedge = mesh_io.TriangleSoup(
        np.vstack([base.vertices, tv]),
        np.vstack([base.faces, top.faces + len(base.vertices)]))
    tree, mesh, state, index = build_state(wedge, H=4)
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        gauss_seidel(state, index)
    assert check_state_invariants(state)


def test_progress_hook_called():
    soup = normalized(shapes.cube())
    tree, mesh, state, index = build_state(soup)
    calls = []
    gauss_seidel(state, index, progress=lambda p, n, e: calls.append((p, n, e)))
    assert calls
    assert calls[0][1] == mesh.n_vertices


def test_max_margin_normal_feasible_and_infeasible():
    n, margin = max_margin_normal(np.array([[0, 0, 1.0], [0, 1.0, 0]]))
    assert margin > 0.5
    assert min(n @ np.array([0, 0, 1.0]), n @ np.array([0, 1.0, 0])) >= margin - 1e-9
    _, margin2 = max_margin_normal(np.array([[0, 0, 1.0], [0, 0, -1.0]]))
    assert margin2 <= 1e-9

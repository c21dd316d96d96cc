import numpy as np
import pytest

import shapes
from watermesh import mesh_io
from watermesh.extract import HalfEdgeMesh, extract_manifold, split_nonmanifold_edges
from watermesh.octree import connect_octree, construct_volume
from watermesh.optimize import gauss_seidel, init_state
from watermesh.sharp import (NewVertex, detect_cut_edges, plan_cuts,
                             preserve_sharp_features, project_sharp, sharp_pass,
                             subdivide)
from watermesh.spatial import build_index
from watermesh.validate import validate_topology


def optimized_pipeline(soup, H=5):
    tree = construct_volume(soup, H)
    connect_octree(tree)
    mesh = extract_manifold(tree)
    index = build_index(soup)
    state = init_state(mesh)
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        gauss_seidel(state, index)
    mesh.vertices[:] = state.positions
    return tree, mesh, index


def rotated_cube_soup():
    return mesh_io.normalize(shapes.rotated(shapes.cube()))[0]


# --- detect_cut_edges ---------------------------------------------------------

def test_flat_reference_interior_has_no_cut_edges():
    # midpoints over the flat interior are coplanar with the reference; only
    # the sheet's boundary rim (a genuine fold feature) may be flagged
    soup = shapes.sheet(n=4, size=0.8, z=0.013)
    tree, mesh, index = optimized_pipeline(soup, H=4)
    cut = detect_cut_edges(mesh, index, tree.leaf_side)
    rim_band = 0.8 - 2 * tree.leaf_side
    for u, w in cut:
        mid = 0.5 * (mesh.vertices[u] + mesh.vertices[w])
        assert np.abs(mid[:2]).max() > rim_band  # every flag hugs the rim


def test_diagonal_crease_is_flagged():
    # the rotated cube's creases run diagonally to the grid: edges crossing
    # them float off the surface and must be cut
    soup = rotated_cube_soup()
    tree, mesh, index = optimized_pipeline(soup, H=5)
    assert len(detect_cut_edges(mesh, index, tree.leaf_side)) > 0


def test_threshold_sweep_monotone():
    soup = rotated_cube_soup()
    tree, mesh, index = optimized_pipeline(soup, H=5)
    counts = [len(detect_cut_edges(mesh, index, tree.leaf_side, mult))
              for mult in (0.5, 1.0, 10.0, 100.0, 1000.0)]
    assert counts == sorted(counts, reverse=True)


# --- subdivide ----------------------------------------------------------------

def octa_mesh():
    v = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0],
                  [0, 0, 1], [0, 0, -1]], dtype=float)
    f = np.array([[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4],
                  [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]])
    m = HalfEdgeMesh(v, f)
    split_nonmanifold_edges(m)
    return m


def test_subdivide_no_cuts_identity():
    m = octa_mesh()
    plan = plan_cuts(m, set())
    out = subdivide(m, plan)
    assert out is m
    assert plan.new_vertices == []


def test_subdivide_one_cut():
    m = octa_mesh()
    plan = plan_cuts(m, {(0, 2)})
    assert plan.face_cuts.sum() == 2  # both incident faces
    out = subdivide(m, plan)
    assert out.n_faces == 8 + 2
    assert out.n_vertices == 7
    assert len(plan.new_vertices) == 1
    assert plan.new_vertices[0].kind == "blue"
    out.check_halfedge_invariants()
    assert validate_topology(out).is_watertight_manifold


def test_subdivide_two_cuts():
    m = octa_mesh()
    plan = plan_cuts(m, {(0, 2), (2, 4)})  # face (0,2,4) gets 2 cuts
    out = subdivide(m, plan)
    # 2-cut faces -> 3, their 1-cut neighbors -> 2
    assert out.n_faces == 8 + 2 + 2
    out.check_halfedge_invariants()
    assert validate_topology(out).is_watertight_manifold


def test_subdivide_three_cuts_red_vertex():
    m = octa_mesh()
    plan = plan_cuts(m, {(0, 2), (2, 4), (0, 4)})
    out = subdivide(m, plan)
    reds = [nv for nv in plan.new_vertices if nv.kind == "red"]
    assert len(reds) == 1
    red = reds[0]
    # the red center fans exactly three central triangles
    valence = int((out.faces == red.vid).sum())
    assert valence == 3
    out.check_halfedge_invariants()
    assert validate_topology(out).is_watertight_manifold


def test_subdivide_preserves_orientation():
    m = octa_mesh()
    plan = plan_cuts(m, {(0, 2)})
    out = subdivide(m, plan)
    # all face normals still point away from the origin (convex octahedron)
    cross = out.face_cross_normals()
    centers = out.vertices[out.faces].mean(axis=1)
    assert (np.einsum("ij,ij->i", cross, centers) > 0).all()


# --- project_sharp ------------------------------------------------------------

def fan_state_around(m_pos, u_pos, w_pos):
    """Tiny fan mesh: center vertex 0 surrounded by a ring including the two
    anchor vertices; open but adequate for targeted vertex updates."""
    ring = [u_pos, [0.8, -0.4, 0.3], w_pos, [-0.2, 0.8, 0.3], [-0.5, -0.5, 0.4]]
    v = np.vstack([[m_pos], ring]).astype(float)
    f = np.array([[0, i + 1, (i + 1) % len(ring) + 1] for i in range(len(ring))])
    mesh = HalfEdgeMesh(v, f)
    state = init_state(mesh, strict=False)
    return mesh, state


def unit_cube_reference():
    return shapes.cube(half=0.5)


def test_blue_vertex_lands_on_crease_line():
    ref = unit_cube_reference()
    index = build_index(ref)
    u = [0.3, 0.3, 0.5]    # on the z=+0.5 face
    w = [0.3, 0.5, 0.3]    # on the y=+0.5 face
    m = [0.3, 0.42, 0.42]  # floats below the crease
    mesh, state = fan_state_around(m, u, w)
    project_sharp(mesh, state, index, [NewVertex(0, "blue", (1, 3))])
    assert np.allclose(state.positions[0], [0.3, 0.5, 0.5], atol=1e-9)


def test_red_vertex_lands_on_corner():
    ref = unit_cube_reference()
    index = build_index(ref)
    a = [0.3, 0.3, 0.5]
    b = [0.5, 0.3, 0.3]
    c = [0.3, 0.5, 0.3]
    m = [0.4, 0.4, 0.4]
    mesh, state = fan_state_around(m, a, b)
    state.positions[2] = c  # reuse one ring slot as the third anchor
    project_sharp(mesh, state, index, [NewVertex(0, "red", (1, 2, 3))])
    assert np.allclose(state.positions[0], [0.5, 0.5, 0.5], atol=1e-9)


def test_coplanar_fallback_projects_to_surface():
    ref = unit_cube_reference()
    index = build_index(ref)
    u = [0.1, 0.1, 0.5]
    w = [0.3, 0.3, 0.5]   # same plane: near-parallel -> fallback
    m = [0.2, 0.2, 0.45]
    mesh, state = fan_state_around(m, u, w)
    fallbacks = project_sharp(mesh, state, index, [NewVertex(0, "blue", (1, 3))])
    assert fallbacks == 1
    assert np.isclose(state.positions[0, 2], 0.5, atol=1e-9)


# --- full sharp pass ----------------------------------------------------------

def test_sharp_pass_progress_and_watertight():
    soup = rotated_cube_soup()
    tree, mesh, index = optimized_pipeline(soup, H=5)
    before = len(detect_cut_edges(mesh, index, tree.leaf_side))
    mesh2, state2, n_cut = sharp_pass(mesh, index, tree.leaf_side)
    assert n_cut == before > 0
    after = len(detect_cut_edges(mesh2, index, tree.leaf_side))
    assert after < before
    mesh2.check_halfedge_invariants()
    assert validate_topology(mesh2).is_watertight_manifold


def test_preserve_sharp_features_capped_passes():
    soup = rotated_cube_soup()
    tree, mesh, index = optimized_pipeline(soup, H=5)
    out, total = preserve_sharp_features(mesh, index, tree.leaf_side)
    assert total > 0
    assert validate_topology(out).is_watertight_manifold


def test_sharp_improves_crease_coverage():
    # R2T coverage over the creases improves once cut edges are projected
    from watermesh.validate import accuracy
    soup = rotated_cube_soup()
    tree, mesh, index = optimized_pipeline(soup, H=5)
    acc_before = accuracy(mesh, soup, n_samples=20000, tree=tree)
    out, _ = preserve_sharp_features(mesh.copy(), index, tree.leaf_side)
    acc_after = accuracy(out, soup, n_samples=20000, tree=tree)
    assert acc_after.r2t_max < acc_before.r2t_max

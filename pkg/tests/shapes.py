"""Synthetic geometry used across the test suite: clean analytic shapes and
an adversarial corpus of broken triangle soups."""

import numpy as np

from watermesh.mesh_io import TriangleSoup

CUBE_FACES = np.array([
    [0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7],
    [0, 1, 5], [0, 5, 4], [1, 2, 6], [1, 6, 5],
    [2, 3, 7], [2, 7, 6], [3, 0, 4], [3, 4, 7],
])


def cube(center=(0.0, 0.0, 0.0), half=1.0):
    c = np.asarray(center, dtype=float)
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                  [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=float)
    v = (v * 2.0 - 1.0) * half + c
    return TriangleSoup(v, CUBE_FACES.copy())


def rotated(soup, deg_z=30.0, deg_x=20.0):
    a = np.radians(deg_z)
    Rz = np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])
    b = np.radians(deg_x)
    Rx = np.array([[1, 0, 0], [0, np.cos(b), -np.sin(b)], [0, np.sin(b), np.cos(b)]])
    return TriangleSoup(soup.vertices @ Rz.T @ Rx.T, soup.faces.copy())


def icosphere(subdiv=3, radius=1.0):
    t = (1 + 5 ** 0.5) / 2
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
                  [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                  [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=float)
    v /= np.linalg.norm(v, axis=1)[:, None]
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    verts = list(v)
    for _ in range(subdiv):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = (np.asarray(verts[a]) + np.asarray(verts[b])) / 2
                m = m / np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(m)
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            nf += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
        f = np.array(nf)
    return TriangleSoup(np.array(verts) * radius, f)


def torus(R=1.0, r=0.4, nu=48, nv=24):
    iu = np.arange(nu)
    iv = np.arange(nv)
    uu, vv = np.meshgrid(iu, iv, indexing="ij")
    theta = 2 * np.pi * uu / nu
    phi = 2 * np.pi * vv / nv
    x = (R + r * np.cos(phi)) * np.cos(theta)
    y = (R + r * np.cos(phi)) * np.sin(theta)
    z = r * np.sin(phi)
    verts = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    faces = []
    for i in range(nu):
        for j in range(nv):
            a = i * nv + j
            b = ((i + 1) % nu) * nv + j
            c = ((i + 1) % nu) * nv + (j + 1) % nv
            d = i * nv + (j + 1) % nv
            faces.append([a, b, c])
            faces.append([a, c, d])
    return TriangleSoup(verts, np.array(faces))


def sheet(n=6, size=1.0, z=0.0):
    """Zero-volume square sheet triangulated as an n x n grid."""
    xs = np.linspace(-size, size, n + 1)
    vv = np.array([[x, y, z] for y in xs for x in xs])
    faces = []
    for j in range(n):
        for i in range(n):
            a = j * (n + 1) + i
            b = a + 1
            c = a + n + 2
            d = a + n + 1
            faces.append([a, b, c])
            faces.append([a, c, d])
    return TriangleSoup(vv, np.array(faces))


def open_box(missing=2):
    s = cube()
    keep = np.ones(len(s.faces), dtype=bool)
    keep[:missing] = False
    return TriangleSoup(s.vertices, s.faces[keep])


def t_junction():
    """Horizontal sheet with a vertical sheet ending mid-face (unshared
    vertices), the classic marching-cubes failure case."""
    h = sheet(n=4, size=1.0, z=0.0)
    v = np.array([[-1, 0, 0], [1, 0, 0], [1, 0, 1], [-1, 0, 1]], dtype=float)
    f = np.array([[0, 1, 2], [0, 2, 3]]) + len(h.vertices)
    return TriangleSoup(np.vstack([h.vertices, v]),
                        np.vstack([h.faces, f]))


def double_surface(flip=True):
    a = sheet(n=3)
    f2 = a.faces[:, ::-1] if flip else a.faces
    return TriangleSoup(np.vstack([a.vertices, a.vertices]),
                        np.vstack([a.faces, f2 + len(a.vertices)]))


def flipped_faces(base, frac=0.5, seed=0):
    rng = np.random.default_rng(seed)
    f = base.faces.copy()
    flip = rng.random(len(f)) < frac
    f[flip] = f[flip][:, ::-1]
    return TriangleSoup(base.vertices.copy(), f)


def self_intersecting_boxes():
    a = cube(center=(0, 0, 0), half=1.0)
    b = cube(center=(0.8, 0.6, 0.5), half=0.9)
    return TriangleSoup(np.vstack([a.vertices, b.vertices]),
                        np.vstack([a.faces, b.faces + len(a.vertices)]))


def moebius(nu=64, width=0.3):
    us = np.linspace(0, 2 * np.pi, nu, endpoint=False)
    verts = []
    for u in us:
        for w in (-width, width):
            x = (1 + w / 2 * np.cos(u / 2)) * np.cos(u)
            y = (1 + w / 2 * np.cos(u / 2)) * np.sin(u)
            z = w / 2 * np.sin(u / 2)
            verts.append((x, y, z))
    faces = []
    for i in range(nu):
        a = 2 * i
        b = 2 * i + 1
        if i + 1 < nu:
            c = 2 * i + 2
            d = 2 * i + 3
        else:
            # the half twist identifies the strip's end with its flipped start
            c = 1
            d = 0
        faces.append([a, b, c])
        faces.append([b, d, c])
    return TriangleSoup(np.array(verts), np.array(faces))


def nested_shells():
    outer = icosphere(2, radius=1.0)
    inner = icosphere(1, radius=0.45)
    return TriangleSoup(np.vstack([outer.vertices, inner.vertices]),
                        np.vstack([outer.faces, inner.faces + len(outer.vertices)]))


def random_soup(n=60, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-1, 1, (n, 3))
    tris = centers[:, None, :] + rng.uniform(-0.4, 0.4, (n, 3, 3))
    v = tris.reshape(-1, 3)
    f = np.arange(3 * n).reshape(-1, 3)
    return TriangleSoup(v, f)


def pinwheel(k=5):
    """k faces sharing one common edge: a maximally non-manifold input."""
    verts = [(0, 0, -1), (0, 0, 1)]
    faces = []
    for i in range(k):
        a = 2 * np.pi * i / k
        verts.append((np.cos(a), np.sin(a), 0))
        faces.append([0, 1, 2 + i])
    return TriangleSoup(np.array(verts, dtype=float), np.array(faces))


def corner_touch_cubes():
    a = cube(center=(-0.5, -0.5, -0.5), half=0.5)
    b = cube(center=(0.5, 0.5, 0.5), half=0.5)
    return TriangleSoup(np.vstack([a.vertices, b.vertices]),
                        np.vstack([a.faces, b.faces + len(a.vertices)]))


def edge_touch_cubes():
    a = cube(center=(-0.5, -0.5, 0.0), half=0.5)
    b = cube(center=(0.5, 0.5, 0.0), half=0.5)
    return TriangleSoup(np.vstack([a.vertices, b.vertices]),
                        np.vstack([a.faces, b.faces + len(a.vertices)]))


def spiral_steps(n=5):
    """Staircase of slabs climbing diagonally: produces fold pinches in the
    occupancy if unhandled."""
    parts = []
    for i in range(n):
        parts.append(cube(center=(0.35 * i, 0.35 * i, 0.2 * i), half=0.3))
    v = np.vstack([p.vertices for p in parts])
    f = np.vstack([p.faces + 8 * i for i, p in enumerate(parts)])
    return TriangleSoup(v, f)


def open_cylinder(n=32, radius=0.6, height=1.4):
    us = np.linspace(0, 2 * np.pi, n, endpoint=False)
    verts = []
    for z in (-height / 2, height / 2):
        for u in us:
            verts.append((radius * np.cos(u), radius * np.sin(u), z))
    faces = []
    for i in range(n):
        a = i
        b = (i + 1) % n
        faces.append([a, b, n + b])
        faces.append([a, n + b, n + a])
    return TriangleSoup(np.array(verts), np.array(faces))


def needle_spikes(n=12, seed=3):
    rng = np.random.default_rng(seed)
    v = []
    f = []
    for i in range(n):
        base = rng.uniform(-0.8, 0.8, 3)
        tip = base + rng.normal(0, 1, 3) * 0.7
        side = rng.normal(0, 1, 3) * 2e-3
        v += [base, base + side, tip]
        f.append([3 * i, 3 * i + 1, 3 * i + 2])
    return TriangleSoup(np.array(v), np.array(f))


def adversarial_corpus():
    """Named fixtures for the correctness acceptance run (>= 25)."""
    fixtures = [
        ("cube", cube()),
        ("rotated_cube", rotated(cube())),
        ("rotated_cube_steep", rotated(cube(), deg_z=47.0, deg_x=33.0)),
        ("sphere", icosphere(3)),
        ("torus", torus()),
        ("sheet", sheet()),
        ("sheet_offgrid", sheet(z=0.013)),
        ("tilted_sheet", rotated(sheet(), deg_z=25, deg_x=35)),
        ("open_box", open_box()),
        ("open_box_one_face", open_box(missing=1)),
        ("t_junction", t_junction()),
        ("double_surface_flipped", double_surface(flip=True)),
        ("double_surface_same", double_surface(flip=False)),
        ("flipped_cube", flipped_faces(cube(), 0.5)),
        ("flipped_sphere", flipped_faces(icosphere(2), 0.4, seed=7)),
        ("self_intersecting_boxes", self_intersecting_boxes()),
        ("moebius", moebius()),
        ("nested_shells", nested_shells()),
        ("random_soup", random_soup(seed=0)),
        ("random_soup_2", random_soup(n=90, seed=11)),
        ("pinwheel", pinwheel()),
        ("corner_touch_cubes", corner_touch_cubes()),
        ("edge_touch_cubes", edge_touch_cubes()),
        ("spiral_steps", spiral_steps()),
        ("open_cylinder", open_cylinder()),
        ("needle_spikes", needle_spikes()),
        ("cube_with_fin", _cube_with_fin()),
    ]
    return fixtures


def _cube_with_fin():
    c = cube(half=0.8)
    fin = np.array([[0.8, -0.5, -0.5], [1.6, 0.0, -0.4], [0.8, 0.5, 0.5]],
                   dtype=float)
    f = np.array([[0, 1, 2]]) + len(c.vertices)
    return TriangleSoup(np.vstack([c.vertices, fin]), np.vstack([c.faces, f]))

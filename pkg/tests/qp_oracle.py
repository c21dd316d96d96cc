"""Independent oracle for projection onto halfspace intersections.

Enumerates every active subset of size 0..3: the projection of the target
onto each subset's affine intersection is a candidate, and the feasible
candidate closest to the target is the exact projection (the optimum's
active set is one of the subsets, and its affine projection equals the
optimum).  Entirely numpy; shares no code with the production solver.
"""

from itertools import combinations

import numpy as np


def project_affine(t, A_s, b_s):
    G = A_s @ A_s.T
    try:
        mu = np.linalg.solve(G, A_s @ t - b_s)
    except np.linalg.LinAlgError:
        mu, *_ = np.linalg.lstsq(G, A_s @ t - b_s, rcond=None)
    return t - A_s.T @ mu


def projection_oracle(t, A, b, tol=1e-9):
    t = np.asarray(t, dtype=float)
    A = np.asarray(A, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1)
    m = len(A)
    best = None
    best_d = np.inf

    def consider(x):
        nonlocal best, best_d
        if not np.all(np.isfinite(x)):
            return
        if m and np.min(A @ x - b) < -tol:
            return
        d = float(((x - t) ** 2).sum())
        if d < best_d:
            best_d = d
            best = x

    consider(t.copy())
    for size in (1, 2, 3):
        for S in combinations(range(m), size):
            consider(project_affine(t, A[list(S)], b[list(S)]))
    return best


def random_instance(rng, m, ensure_feasible_start=True):
    """Random halfspaces with a guaranteed-feasible start and random target."""
    A = rng.normal(size=(m, 3))
    A /= np.linalg.norm(A, axis=1, keepdims=True) + 1e-300
    A *= rng.uniform(0.2, 2.0, size=(m, 1))
    x0 = rng.normal(size=3) * 0.5
    slack = rng.uniform(0.0, 0.8, size=m)
    b = A @ x0 - slack if ensure_feasible_start else rng.normal(size=m)
    t = rng.normal(size=3) * rng.uniform(0.5, 3.0)
    return t, A, b, x0

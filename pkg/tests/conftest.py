import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

import shapes  # noqa: E402
import watermesh as wm  # noqa: E402


@pytest.fixture(scope="session", autouse=True)
def warm_jit():
    """Compile the numba kernels once before any timed assertions."""
    soup = shapes.cube()
    norm, _ = wm.normalize(soup)
    wm.remesh(norm, depth=3, sharp=True)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)

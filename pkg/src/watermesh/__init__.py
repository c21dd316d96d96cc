"""watermesh: convert triangle soups into watertight, inversion-free manifolds."""

from .mesh_io import (NormalizationTransform, PointCloud, TriangleSoup,
                      load_mesh, load_point_cloud, normalize, save_mesh)
from .octree import Octree, boundary_leaves, connect_octree, construct_volume, tri_box_intersect
from .extract import (HalfEdgeMesh, InterfaceQuad, extract_interface, label_exterior,
                      split_nonmanifold_edges, split_nonmanifold_vertices,
                      triangulate_and_stitch)
from .spatial import NearestPointIndex, build_index, nearest_point
from .optimize import (ConvexQP, OptimState, gauss_seidel, init_state,
                       solve_projection_qp, update_normal, update_vertex)
from .sharp import detect_cut_edges, preserve_sharp_features, project_sharp, subdivide
from .validate import (AccuracyReport, ValidationReport, accuracy, chamfer,
                       validate_topology)
from .cli import PipelineConfig, remesh

__version__ = "0.1.0"

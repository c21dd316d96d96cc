"""Batch command-line front end.

Pipeline per input: load -> normalize -> octree -> connect -> label ->
extract -> repair -> optimize -> sharp -> validate -> denormalize -> save.
Exit status is nonzero iff any output fails validation or an I/O error
occurs; batch items are processed independently.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import mesh_io, octree, extract, optimize, sharp as sharp_mod, spatial, validate
from .errors import WatermeshError

logger = logging.getLogger("watermesh")


@dataclass
class PipelineConfig:
    inputs: list
    output: str
    depth: int = 8
    sharp: bool = True
    sharp_threshold: float = 1.0
    scan: bool = False
    metrics: bool = False
    save_raw: bool = False
    dump_octree: bool = False
    max_passes: int = 50
    seed: int = 0
    verbose: bool = False

    def check(self):
        if not (1 <= self.depth <= 14):
            raise ValueError(f"depth {self.depth} outside [1, 14]")
        for p in self.inputs:
            if not os.path.exists(p):
                raise FileNotFoundError(p)


@dataclass
class RemeshResult:
    mesh: extract.HalfEdgeMesh
    tree: octree.Octree
    state: optimize.OptimState
    report: validate.ValidationReport
    accuracy: validate.AccuracyReport = None
    timings: dict = field(default_factory=dict)
    update_counter: int = 0


def _timed(timings, name, fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    timings[name] = time.perf_counter() - t0
    return out


def remesh(reference, depth=8, sharp=True, sharp_threshold=1.0,
           max_passes=50, seed=0, metrics=False, progress=None,
           raw_hook=None) -> RemeshResult:
    """In-memory pipeline over a normalized TriangleSoup or PointCloud.

    ``raw_hook`` receives the pre-optimization mesh (for --save-raw).
    Sharp recovery only applies in mesh mode (plane targets need reference
    triangles).
    """
    timings = {}
    scan_mode = isinstance(reference, mesh_io.PointCloud)
    tree = _timed(timings, "octree", octree.construct_volume, reference, depth)
    _timed(timings, "connect", octree.connect_octree, tree)
    mesh = _timed(timings, "extract", extract.extract_manifold, tree)
    if raw_hook is not None:
        raw_hook(mesh.copy())
    state = None
    if mesh.n_faces:
        index = _timed(timings, "index", spatial.build_index, reference)
        state = optimize.init_state(mesh)
        _timed(timings, "optimize", optimize.gauss_seidel, state, index,
               max_passes, progress)
        mesh.vertices[:] = state.positions
        if sharp and not scan_mode:
            def run_sharp():
                return sharp_mod.preserve_sharp_features(
                    mesh, index, tree.leaf_side, sharp_threshold)
            new_mesh, n_cut = _timed(timings, "sharp", run_sharp)
            if n_cut:
                mesh = new_mesh
    report = _timed(timings, "validate", validate.validate_topology, mesh)
    acc = None
    if metrics and not scan_mode and mesh.n_faces:
        acc = _timed(timings, "accuracy", validate.accuracy, mesh, reference,
                     100_000, seed, tree)
    return RemeshResult(mesh=mesh, tree=tree, state=state, report=report,
                        accuracy=acc, timings=timings,
                        update_counter=state.update_counter if state else 0)


def _dump_octree_ply(tree, path):
    leaves = tree.leaves()
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(leaves)}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        fh.write("property double side\nproperty uchar status\nend_header\n")
        for idx in leaves:
            mn, side = tree.node_box(idx)
            c = mn + side / 2.0
            fh.write("%.9g %.9g %.9g %.9g %d\n"
                     % (c[0], c[1], c[2], side, int(tree.status[idx])))


def _print_metrics(prefix, pairs):
    for k, v in pairs.items():
        print(f"{prefix}{k}={v}")


def process_file(path, out_path, cfg: PipelineConfig) -> bool:
    """One mesh-mode batch item; returns True on a validated, written output."""
    t_start = time.perf_counter()
    soup = mesh_io.load_mesh(path)
    for w in soup.warnings:
        logger.warning("%s: %s", path, w)
    norm, tf = mesh_io.normalize(soup)
    norm = mesh_io.drop_degenerate_faces(norm)
    if norm.n_faces == 0:
        raise mesh_io.EmptyMesh(f"{path}: no usable faces")

    progress = None
    if cfg.verbose:
        def progress(p, n_active, max_ed):
            logger.info("  pass %d: %d active, max E_D %.3e", p, n_active, max_ed)

    raw_hook = None
    if cfg.save_raw:
        def raw_hook(raw_mesh):
            mesh_io.save_mesh(raw_mesh, tf, out_path + ".raw.obj", "obj")

    result = remesh(norm, depth=cfg.depth, sharp=cfg.sharp,
                    sharp_threshold=cfg.sharp_threshold,
                    max_passes=cfg.max_passes, seed=cfg.seed,
                    metrics=cfg.metrics, progress=progress, raw_hook=raw_hook)
    if cfg.dump_octree:
        _dump_octree_ply(result.tree, out_path + ".octree.ply")

    ok = result.report.is_watertight_manifold
    if not ok:
        logger.error("%s: output is not a watertight manifold: %s",
                     path, result.report.as_dict())
    else:
        mesh_io.save_mesh(result.mesh, tf, out_path)
    if cfg.metrics:
        _print_metrics(f"{os.path.basename(path)} ", result.report.as_dict())
        if result.accuracy is not None:
            _print_metrics(f"{os.path.basename(path)} ", result.accuracy.as_dict())
        print(f"{os.path.basename(path)} updates={result.update_counter} "
              f"faces={result.mesh.n_faces}")
    if cfg.verbose:
        for stage, dt in result.timings.items():
            logger.info("  %-10s %.3fs", stage, dt)
        logger.info("%s done in %.2fs", path, time.perf_counter() - t_start)
    return ok


def run(cfg: PipelineConfig) -> int:
    """Mesh-mode entry: batch over cfg.inputs.  A failure on one file does
    not abort the rest; the exit status reports any failure."""
    cfg.check()
    batch = len(cfg.inputs) > 1
    if batch and not os.path.isdir(cfg.output):
        os.makedirs(cfg.output, exist_ok=True)
    failures = 0
    items = []
    for path in cfg.inputs:
        if batch or os.path.isdir(cfg.output):
            base = os.path.splitext(os.path.basename(path))[0] + ".obj"
            items.append((path, os.path.join(cfg.output, base)))
        else:
            items.append((path, cfg.output))

    max_workers = int(os.environ.get("MF_THREADS", "1"))
    if max_workers > 1 and len(items) > 1:
        import concurrent.futures as cf
        with cf.ProcessPoolExecutor(max_workers=min(max_workers, len(items))) as ex:
            futs = {ex.submit(process_file, p, o, cfg): p for p, o in items}
            for fut in cf.as_completed(futs):
                try:
                    if not fut.result():
                        failures += 1
                except (WatermeshError, OSError, ValueError) as exc:
                    logger.error("%s: %s", futs[fut], exc)
                    failures += 1
    else:
        for p, o in items:
            try:
                if not process_file(p, o, cfg):
                    failures += 1
            except (WatermeshError, OSError, ValueError) as exc:
                logger.error("%s: %s", p, exc)
                failures += 1
    return 1 if failures else 0


def run_scan(cfg: PipelineConfig) -> int:
    """Scan-mode entry: merge the input point files, build occupancy from
    points, optimize with point-to-point distances."""
    cfg.check()
    cloud = mesh_io.load_point_cloud(cfg.inputs)
    norm_cloud, tf = mesh_io.normalize_points(cloud)
    result = remesh(norm_cloud, depth=cfg.depth, sharp=False,
                    max_passes=cfg.max_passes, seed=cfg.seed)
    if cfg.dump_octree:
        _dump_octree_ply(result.tree, cfg.output + ".octree.ply")
    ok = result.report.is_watertight_manifold
    if not ok:
        logger.error("scan output is not a watertight manifold: %s",
                     result.report.as_dict())
    else:
        mesh_io.save_mesh(result.mesh, tf, cfg.output)
    if cfg.metrics:
        _print_metrics("scan ", result.report.as_dict())
        if result.mesh.n_vertices:
            a2b, b2a = validate.chamfer(
                mesh_io.PointCloud(tf.invert(result.mesh.vertices)), cloud)
            _print_metrics("scan ", {"verts2cloud": a2b, "cloud2verts": b2a})
    return 0 if ok else 1


def build_parser():
    ap = argparse.ArgumentParser(
        prog="watermesh",
        description="Convert triangle soups (or merged scans) into watertight, "
                    "inversion-free manifold meshes.")
    ap.add_argument("--input", nargs="+", required=True,
                    help="input mesh file(s); point files in --scan mode")
    ap.add_argument("--output", required=True,
                    help="output mesh path (directory in batch mode)")
    ap.add_argument("--depth", type=int, default=8,
                    help="octree depth H, 1..14 (default 8)")
    ap.add_argument("--sharp", choices=["on", "off"], default="on",
                    help="sharp feature recovery (default on)")
    ap.add_argument("--sharp-threshold", type=float, default=1.0,
                    help="multiplier on the midpoint-distance cut threshold")
    ap.add_argument("--scan", action="store_true",
                    help="scan mode: inputs are point clouds")
    ap.add_argument("--metrics", action="store_true",
                    help="print validation/accuracy metrics as key=value lines")
    ap.add_argument("--save-raw", action="store_true",
                    help="also write the pre-optimization extraction")
    ap.add_argument("--dump-octree", action="store_true",
                    help="write leaf centers + status as a PLY debug cloud")
    ap.add_argument("--max-passes", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s")
    cfg = PipelineConfig(
        inputs=args.input, output=args.output, depth=args.depth,
        sharp=args.sharp == "on", sharp_threshold=args.sharp_threshold,
        scan=args.scan, metrics=args.metrics, save_raw=args.save_raw,
        dump_octree=args.dump_octree, max_passes=args.max_passes,
        seed=args.seed, verbose=args.verbose)
    try:
        return run_scan(cfg) if cfg.scan else run(cfg)
    except (WatermeshError, OSError, ValueError) as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())

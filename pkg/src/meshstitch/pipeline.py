"""End-to-end stitching pipeline: features -> energy -> solve -> compose."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import compose, masks, meshwarp, metrics, solver
from .features import (FeatureError, InsufficientOverlapError, MatchSet,
                       apply_homography, decompose_similarity,
                       detect_and_match, estimate_homography_ransac)
from .imgcore import Raster

logger = logging.getLogger(__name__)

MODES = ("gsp", "obj-chain", "obj-fan")


class PipelineError(Exception):
    pass


@dataclass
class StitchConfig:
    mode: str = "obj-fan"
    lambda_local: float = meshwarp.DEFAULT_LAMBDA_LOCAL
    lambda_structure: float = meshwarp.DEFAULT_LAMBDA_STRUCTURE
    cell_size: float = 40.0
    delta: float = 20.0
    min_area_fraction: float = 0.001
    outer_iterations: int = 2
    target_move_tol: float = 0.1
    ransac_threshold: float = 3.0
    ransac_iterations: int = 2000
    seed: int = 0
    feather_cells: float = 2.0
    omega_overlap: bool = False        # down-weight samples inside the overlap
    omega_overlap_factor: float = 0.5
    include_center: bool = False       # full per-triangle energy incl. center
    topology: str = "star"             # or "chain"
    gauge: str = "fixed"               # reference mesh fixed, or "free"
    global_weight_beta: float = 0.1
    global_weight_gamma: float = 1.0
    cg_tol: float = 1e-8

    def validate(self):
        if self.mode not in MODES:
            raise PipelineError(f"unknown mode {self.mode!r}")
        if self.topology not in ("star", "chain"):
            raise PipelineError(f"unknown topology {self.topology!r}")
        if self.gauge not in ("fixed", "free"):
            raise PipelineError(f"unknown gauge {self.gauge!r}")
        for name in ("lambda_local", "lambda_structure", "cell_size", "delta",
                     "outer_iterations", "ransac_threshold", "ransac_iterations",
                     "feather_cells"):
            if getattr(self, name) <= 0:
                raise PipelineError(f"{name} must be positive")
        if not 0 <= self.min_area_fraction < 1:
            raise PipelineError("min_area_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StitchResult:
    panorama: Raster
    report: metrics.MetricReport
    meshes: dict
    canvas: compose.Canvas
    structures: dict
    pair_matches: list
    homographies: dict
    system_stats: dict


def _pairs_for(n_images: int, topology: str):
    if topology == "star":
        return [(i, 0) for i in range(1, n_images)]
    return [(i, i - 1) for i in range(1, n_images)]


def _overlap_mask(width, height, h_to_ref, ref_width, ref_height) -> np.ndarray:
    """Pixels of this image whose homography image lands inside the reference."""
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    pts = np.column_stack([xs.ravel(), ys.ravel()])
    mapped = apply_homography(h_to_ref, pts)
    inside = ((mapped[:, 0] >= 0) & (mapped[:, 0] <= ref_width - 1)
              & (mapped[:, 1] >= 0) & (mapped[:, 1] <= ref_height - 1))
    return inside.reshape(height, width)


def _gauge_rows(sys, layout, mesh, weight=1000.0):
    """Anchor a free reference mesh: centroid at rest plus zero net rotation."""
    rest = mesh.rest.reshape(-1, 2)
    centroid = rest.mean(axis=0)
    n = len(rest)
    cx, cy = meshwarp.Expr(const=-centroid[0]), meshwarp.Expr(const=-centroid[1])
    rot = meshwarp.Expr()
    for vid in range(n):
        fx, fy = meshwarp.vertex_expr(layout, mesh, vid)
        cx.add(fx, 1.0 / n)
        cy.add(fy, 1.0 / n)
        dx, dy = rest[vid] - centroid
        rot.add(fy, dx).add(fx, -dy)
        rot.const += dy * rest[vid, 0] - dx * rest[vid, 1]
    sys.add_row(cx.scaled(weight), "global")
    sys.add_row(cy.scaled(weight), "global")
    sys.add_row(rot.scaled(weight / max(1.0, mesh.width)), "global")


def stitch(images, mask_sets=None, provided_matches=None,
           config: StitchConfig = None) -> StitchResult:
    """Stitch images[1:] onto the plane of images[0].

    mask_sets: {image_index: MaskSet} for non-reference images (optional).
    provided_matches: {(i, j): MatchSet} overriding built-in detection for
    those pairs; p coordinates live in image i, q in image j.
    """
    config = config or StitchConfig()
    config.validate()
    if len(images) < 2:
        raise PipelineError("need at least 2 images")
    mask_sets = mask_sets or {}
    provided_matches = provided_matches or {}

    pairs = _pairs_for(len(images), config.topology)

    pair_matches = []
    pair_h = {}
    for i, j in pairs:
        m = provided_matches.get((i, j))
        if m is None:
            m = detect_and_match(images[i], images[j],
                                 ransac_threshold=config.ransac_threshold,
                                 ransac_iterations=config.ransac_iterations,
                                 seed=config.seed)
            m = MatchSet((i, j), m.p, m.q, m.weight)
        if len(m) < 4:
            raise InsufficientOverlapError(
                f"pair ({i},{j}): {len(m)} matches, need >= 4")
        h, inliers = estimate_homography_ransac(
            m, threshold=config.ransac_threshold,
            iterations=config.ransac_iterations, seed=config.seed)
        if len(inliers) < 4:
            raise InsufficientOverlapError(
                f"pair ({i},{j}): only {len(inliers)} RANSAC inliers")
        # noisy inliers can land a hair outside the image; the energy terms
        # require in-domain points
        def _inside(pts, img):
            return ((pts[:, 0] >= 0) & (pts[:, 0] <= img.width - 1)
                    & (pts[:, 1] >= 0) & (pts[:, 1] <= img.height - 1))
        keep = _inside(inliers.p, images[i]) & _inside(inliers.q, images[j])
        inliers = MatchSet((i, j), inliers.p[keep], inliers.q[keep],
                           inliers.weight[keep])
        if len(inliers) < 4:
            raise InsufficientOverlapError(
                f"pair ({i},{j}): only {len(inliers)} usable inliers")
        pair_matches.append((i, j, inliers))
        pair_h[(i, j)] = h

    # chain homographies to the reference frame
    h_to_ref = {0: np.eye(3)}
    for i, j in pairs:
        h_to_ref[i] = h_to_ref[j] @ pair_h[(i, j)]
        h_to_ref[i] /= h_to_ref[i][2, 2]

    meshes = {}
    for idx, img in enumerate(images):
        meshes[idx] = meshwarp.build_mesh(img, config.cell_size, image_id=idx)

    similarities = {}
    overlaps = {}
    weight_fns = {}
    for idx in range(len(images)):
        if idx == 0 and config.gauge == "fixed":
            continue
        s, theta = (1.0, 0.0) if idx == 0 else decompose_similarity(
            h_to_ref[idx], images[idx].width, images[idx].height)
        similarities[idx] = (s, theta)
        if idx != 0:
            overlaps[idx] = _overlap_mask(images[idx].width, images[idx].height,
                                          h_to_ref[idx], images[0].width,
                                          images[0].height)
            weight_fns[idx] = meshwarp.overlap_edge_weight_fn(
                overlaps[idx], config.global_weight_beta,
                config.global_weight_gamma)

    structures = {}
    if config.mode != "gsp":
        for idx, ms in mask_sets.items():
            if idx == 0:
                continue  # the reference is never warped away from rest
            structs = masks.structures_from_maskset(
                ms, config.delta, config.min_area_fraction)
            if config.omega_overlap and idx in overlaps:
                structs = [masks.apply_overlap_weights(
                    st, overlaps[idx], config.omega_overlap_factor)
                    for st in structs]
            if structs:
                structures[idx] = structs
    strategy = "chain" if config.mode == "obj-chain" else "fan"

    fixed = {0} if config.gauge == "fixed" else set()
    layout = meshwarp.Layout(meshes, fixed=fixed)

    # stage 0: desired positions from the chained homographies
    targets = {idx: meshwarp.compute_structure_targets(
        structures[idx], homography=h_to_ref[idx]) for idx in structures}

    system = None
    energies_init = None
    solution = None
    x = layout.rest_x()
    for stage in range(config.outer_iterations):
        system = meshwarp.assemble(
            layout, pair_matches, similarities, structures=structures,
            targets=targets, lambda_local=config.lambda_local,
            lambda_structure=config.lambda_structure, weight_fns=weight_fns,
            strategy=strategy, include_center=config.include_center)
        if config.gauge == "free":
            _gauge_rows(system, layout, meshes[0])
        if energies_init is None:
            energies_init = system.energy_by_tag(layout.rest_x())
        sparse = system.to_sparse()
        solution = solver.solve_normal_cg(sparse, tol=config.cg_tol, x0=x)
        if not solution.converged:
            logger.warning("CG stopped after %d iterations without meeting tol",
                           solution.iterations)
        x = solution.x
        layout.apply_x(x)
        new_targets = {idx: meshwarp.compute_structure_targets(
            structures[idx], mesh=meshes[idx]) for idx in structures}
        move = 0.0
        for idx in targets:
            old = targets[idx].all_points()
            new = new_targets[idx].all_points()
            if len(old):
                move = max(move, float(np.abs(old - new).max()))
        targets = new_targets
        if move < config.target_move_tol:
            break

    energies_final = system.energy_by_tag(x)
    mesh_list = [meshes[i] for i in sorted(meshes)]

    per_image = {}
    mdr = metrics.compute_mdr(mesh_list, per_image=per_image)
    overlap_rmse = metrics.compute_overlap_rmse(pair_matches, meshes)
    report = metrics.MetricReport(
        mdr=mdr, overlap_rmse=overlap_rmse, per_image=per_image,
        term_energies=energies_final,
        notes=["distortion metric is a normalized reconstruction; absolute "
               "values are comparable only within this implementation",
               "no-reference quality scoring (NIQE-style) intentionally absent"])

    canvas = compose.compute_canvas(mesh_list)
    layers = [compose.warp_image(images[i], meshes[i], canvas,
                                 config.feather_cells)
              for i in sorted(meshes)]
    panorama = compose.blend(layers)

    stats = {
        "rows_by_term": system.rows_by_tag(),
        "unknowns": layout.n,
        "energies_init": energies_init,
        "energies_final": energies_final,
        "cg_iterations": solution.iterations,
        "cg_converged": bool(solution.converged),
    }
    return StitchResult(panorama=panorama, report=report, meshes=meshes,
                        canvas=canvas, structures=structures,
                        pair_matches=pair_matches, homographies=h_to_ref,
                        system_stats=stats)

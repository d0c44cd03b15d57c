"""Mesh-deformation image stitching with object-level structure preservation."""

from .imgcore import Raster, load_raster, sample_bilinear, write_raster
from .features import (MatchSet, detect_and_match, estimate_homography_ransac,
                       decompose_similarity, read_matches, write_matches)
from .masks import (MaskSet, Contour, ObjectStructure, load_mask_manifest,
                    filter_small_masks, trace_contour, build_structure)
from .meshwarp import GridMesh, build_mesh, anchor, assemble
from .solver import SparseSystem, solve_normal_cg, solve_direct_dense
from .compose import compute_canvas, warp_image, blend
from .metrics import MetricReport, compute_mdr, compute_overlap_rmse
from .pipeline import StitchConfig, StitchResult, stitch

__version__ = "0.1.0"

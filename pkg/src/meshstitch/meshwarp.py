"""Grid meshes, bilinear anchors and assembly of the stitching energy.

Every energy term is a set of residual rows that are linear in the global
unknown vector (the free vertex coordinates of all non-fixed meshes), so the
whole objective is one sparse linear least-squares problem:

  alignment  — matched feature points coincide after warping
  local      — each cell's edges follow the cell's best-fit similarity
  global     — each edge follows the image's global scale/rotation
  structure  — each object's triangle fan keeps its local coordinates
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import masks as masks_mod
from .features import apply_homography, fit_similarity
from .imgcore import Raster
from .solver import SparseSystem

TERM_TAGS = ("alignment", "local", "global", "structure")

DEFAULT_LAMBDA_LOCAL = 0.75
DEFAULT_LAMBDA_STRUCTURE = 1.5


class MeshError(Exception):
    pass


@dataclass
class GridMesh:
    """Uniform deformable lattice over one image.

    rest holds the original vertex positions, free the current (or solved)
    ones; both are (rows+1, cols+1, 2) arrays indexed [row, col, xy].
    """

    image_id: int
    width: int
    height: int
    cols: int
    rows: int
    rest: np.ndarray
    free: np.ndarray

    @property
    def cell_w(self) -> float:
        return (self.width - 1) / self.cols

    @property
    def cell_h(self) -> float:
        return (self.height - 1) / self.rows

    @property
    def n_vertices(self) -> int:
        return (self.cols + 1) * (self.rows + 1)

    def vertex_id(self, row: int, col: int) -> int:
        return row * (self.cols + 1) + col

    def copy(self) -> "GridMesh":
        return GridMesh(self.image_id, self.width, self.height, self.cols,
                        self.rows, self.rest.copy(), self.free.copy())


def build_mesh(img, target_cell: float, image_id: int = 0) -> GridMesh:
    """Mesh with ceil(width/target_cell) x ceil(height/target_cell) cells whose
    rest lattice spans [0, width-1] x [0, height-1]. Free starts at rest."""
    if target_cell <= 0:
        raise MeshError("target cell size must be positive")
    if isinstance(img, Raster):
        width, height = img.width, img.height
    else:
        width, height = img
    cols = max(1, math.ceil(width / target_cell))
    rows = max(1, math.ceil(height / target_cell))
    xs = np.linspace(0.0, width - 1.0, cols + 1)
    ys = np.linspace(0.0, height - 1.0, rows + 1)
    rest = np.stack(np.meshgrid(xs, ys), axis=-1)
    return GridMesh(image_id=image_id, width=width, height=height,
                    cols=cols, rows=rows, rest=rest, free=rest.copy())


@dataclass
class BilinearAnchor:
    """A point expressed as a convex combination of its cell's 4 vertices.

    vertex_ids are per-mesh vertex indices in order TL, TR, BL, BR.
    """

    cell: tuple
    weights: np.ndarray
    vertex_ids: np.ndarray


def anchor(mesh: GridMesh, p) -> BilinearAnchor:
    """Bilinear coefficients of p within its cell; exact at rest."""
    x, y = float(p[0]), float(p[1])
    if not (0.0 <= x <= mesh.width - 1 and 0.0 <= y <= mesh.height - 1):
        raise MeshError(f"point ({x}, {y}) outside mesh domain "
                        f"{mesh.width}x{mesh.height}")
    col = min(int(x / mesh.cell_w), mesh.cols - 1)
    row = min(int(y / mesh.cell_h), mesh.rows - 1)
    u = (x - col * mesh.cell_w) / mesh.cell_w
    v = (y - row * mesh.cell_h) / mesh.cell_h
    weights = np.array([(1 - u) * (1 - v), u * (1 - v), (1 - u) * v, u * v])
    ids = np.array([mesh.vertex_id(row, col), mesh.vertex_id(row, col + 1),
                    mesh.vertex_id(row + 1, col), mesh.vertex_id(row + 1, col + 1)])
    return BilinearAnchor(cell=(col, row), weights=weights, vertex_ids=ids)


def warp_points(mesh: GridMesh, pts) -> np.ndarray:
    """Evaluate the mesh warp at the given rest-coordinate points."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    out = np.empty_like(pts)
    flat = mesh.free.reshape(-1, 2)
    for i, p in enumerate(pts):
        a = anchor(mesh, p)
        out[i] = a.weights @ flat[a.vertex_ids]
    return out


# ---------------------------------------------------------------------------
# Linear-expression assembly

class Layout:
    """Maps (image_id, vertex_id, coordinate) to global unknown columns.

    Meshes listed in `fixed` contribute constants (their current free
    positions) instead of unknowns; this is the gauge fixing that keeps the
    normal matrix positive definite.
    """

    def __init__(self, meshes: dict, fixed=()):
        self.meshes = meshes
        self.fixed = set(fixed)
        self.offsets = {}
        n = 0
        for image_id in sorted(meshes):
            if image_id in self.fixed:
                continue
            self.offsets[image_id] = n
            n += 2 * meshes[image_id].n_vertices
        self.n = n

    def column(self, image_id: int, vertex_id: int, coord: int):
        if image_id in self.fixed:
            return None
        return self.offsets[image_id] + 2 * vertex_id + coord

    def rest_x(self) -> np.ndarray:
        """Unknown vector with every free mesh at its rest configuration."""
        x = np.empty(self.n)
        for image_id, off in self.offsets.items():
            m = self.meshes[image_id]
            x[off: off + 2 * m.n_vertices] = m.rest.reshape(-1)
        return x

    def current_x(self) -> np.ndarray:
        x = np.empty(self.n)
        for image_id, off in self.offsets.items():
            m = self.meshes[image_id]
            x[off: off + 2 * m.n_vertices] = m.free.reshape(-1)
        return x

    def apply_x(self, x: np.ndarray) -> None:
        """Write a solution vector back into the meshes' free vertices."""
        for image_id, off in self.offsets.items():
            m = self.meshes[image_id]
            m.free = x[off: off + 2 * m.n_vertices].reshape(m.free.shape)


class Expr:
    """Scalar linear expression: sum of coeff*unknown plus a constant."""

    __slots__ = ("terms", "const")

    def __init__(self, terms=None, const=0.0):
        self.terms = terms if terms is not None else {}
        self.const = const

    def add(self, other, scale=1.0):
        for c, v in other.terms.items():
            self.terms[c] = self.terms.get(c, 0.0) + scale * v
        self.const += scale * other.const
        return self

    def scaled(self, s):
        return Expr({c: s * v for c, v in self.terms.items()}, s * self.const)

    def value(self, x) -> float:
        return self.const + sum(v * x[c] for c, v in self.terms.items())


def point_expr(layout: Layout, mesh: GridMesh, p):
    """(x, y) expressions of the warped position of rest point p."""
    a = anchor(mesh, p)
    ex, ey = Expr(), Expr()
    flat = mesh.free.reshape(-1, 2)
    for w, vid in zip(a.weights, a.vertex_ids):
        cx = layout.column(mesh.image_id, int(vid), 0)
        if cx is None:
            ex.const += w * flat[vid, 0]
            ey.const += w * flat[vid, 1]
        else:
            ex.terms[cx] = ex.terms.get(cx, 0.0) + w
            ey.terms[cx + 1] = ey.terms.get(cx + 1, 0.0) + w
    return ex, ey


def vertex_expr(layout: Layout, mesh: GridMesh, vid: int):
    cx = layout.column(mesh.image_id, vid, 0)
    flat = mesh.free.reshape(-1, 2)
    if cx is None:
        return Expr(const=flat[vid, 0]), Expr(const=flat[vid, 1])
    return Expr({cx: 1.0}), Expr({cx + 1: 1.0})


@dataclass
class EnergySystem:
    """Stacked residual rows r = A x - b with per-row term tags."""

    n: int
    rows: list = field(default_factory=list)   # list of (terms dict, const)
    tags: list = field(default_factory=list)
    lambdas: tuple = (DEFAULT_LAMBDA_LOCAL, DEFAULT_LAMBDA_STRUCTURE)

    @property
    def m(self) -> int:
        return len(self.rows)

    def add_row(self, expr: Expr, tag: str) -> None:
        if not all(math.isfinite(v) for v in expr.terms.values()) or not math.isfinite(expr.const):
            raise MeshError("non-finite coefficient in residual row")
        self.rows.append((expr.terms, expr.const))
        self.tags.append(tag)

    def to_sparse(self) -> SparseSystem:
        ri, ci, vals, rhs = [], [], [], np.empty(self.m)
        for i, (terms, const) in enumerate(self.rows):
            for c in sorted(terms):
                ri.append(i)
                ci.append(c)
                vals.append(terms[c])
            rhs[i] = -const  # residual = A x + const, so b = -const
        return SparseSystem(m=self.m, n=self.n,
                            rows=np.asarray(ri, dtype=np.int64),
                            cols=np.asarray(ci, dtype=np.int64),
                            vals=np.asarray(vals, dtype=np.float64),
                            rhs=rhs)

    def residuals(self, x: np.ndarray) -> np.ndarray:
        r = np.empty(self.m)
        for i, (terms, const) in enumerate(self.rows):
            r[i] = const + sum(v * x[c] for c, v in terms.items())
        return r

    def energy(self, x: np.ndarray) -> float:
        return float((self.residuals(x) ** 2).sum())

    def energy_by_tag(self, x: np.ndarray) -> dict:
        r = self.residuals(x)
        out = {t: 0.0 for t in TERM_TAGS}
        for ri, tag in zip(r, self.tags):
            out[tag] += ri * ri
        return out

    def rows_by_tag(self) -> dict:
        out = {t: 0 for t in TERM_TAGS}
        for tag in self.tags:
            out[tag] += 1
        return out


# ---------------------------------------------------------------------------
# Energy terms

def add_alignment_term(sys: EnergySystem, layout: Layout, matches,
                       mesh_p: GridMesh, mesh_q: GridMesh) -> None:
    """Two rows per match: warped p minus warped q, scaled by the match weight."""
    for k in range(len(matches)):
        w = float(matches.weight[k])
        px, py = point_expr(layout, mesh_p, matches.p[k])
        qx, qy = point_expr(layout, mesh_q, matches.q[k])
        sys.add_row(px.add(qx, -1.0).scaled(w), "alignment")
        sys.add_row(py.add(qy, -1.0).scaled(w), "alignment")


_CELL_EDGES = ((0, 1), (1, 3), (3, 2), (2, 0))  # TL-TR, TR-BR, BR-BL, BL-TL


def add_local_similarity_term(sys: EnergySystem, layout: Layout,
                              mesh: GridMesh, lam: float = DEFAULT_LAMBDA_LOCAL) -> None:
    """Per cell: fit the cell's similarity in closed form (linear in the free
    vertices) and penalize each cell edge's deviation from it."""
    sq = math.sqrt(lam)
    for row in range(mesh.rows):
        for col in range(mesh.cols):
            vids = [mesh.vertex_id(row, col), mesh.vertex_id(row, col + 1),
                    mesh.vertex_id(row + 1, col), mesh.vertex_id(row + 1, col + 1)]
            rest = mesh.rest.reshape(-1, 2)[vids]
            centered = rest - rest.mean(axis=0)
            denom = float((centered ** 2).sum())
            exprs = [vertex_expr(layout, mesh, v) for v in vids]
            # Procrustes similarity parameters of the cell, a + i b
            a_expr, b_expr = Expr(), Expr()
            for (fx, fy), (hx, hy) in zip(exprs, centered):
                a_expr.add(fx, hx / denom).add(fy, hy / denom)
                b_expr.add(fy, hx / denom).add(fx, -hy / denom)
            for j, k in _CELL_EDGES:
                dx, dy = rest[k] - rest[j]
                rx = Expr().add(exprs[k][0]).add(exprs[j][0], -1.0)
                rx.add(a_expr, -dx).add(b_expr, dy)
                ry = Expr().add(exprs[k][1]).add(exprs[j][1], -1.0)
                ry.add(b_expr, -dx).add(a_expr, -dy)
                sys.add_row(rx.scaled(sq), "local")
                sys.add_row(ry.scaled(sq), "local")


def iter_lattice_edges(mesh: GridMesh):
    for row in range(mesh.rows + 1):
        for col in range(mesh.cols):
            yield mesh.vertex_id(row, col), mesh.vertex_id(row, col + 1)
    for row in range(mesh.rows):
        for col in range(mesh.cols + 1):
            yield mesh.vertex_id(row, col), mesh.vertex_id(row + 1, col)


def add_global_similarity_term(sys: EnergySystem, layout: Layout, mesh: GridMesh,
                               scale: float, theta: float, weight_fn=None) -> None:
    """Per lattice edge: its implied similarity parameters c(e), s(e) should
    match the image's global (scale, rotation)."""
    target_c = scale * math.cos(theta)
    target_s = scale * math.sin(theta)
    rest = mesh.rest.reshape(-1, 2)
    for j, k in iter_lattice_edges(mesh):
        d = rest[k] - rest[j]
        l2 = float(d @ d)
        mid = 0.5 * (rest[j] + rest[k])
        w = 1.0 if weight_fn is None else float(weight_fn(mid))
        fxj, fyj = vertex_expr(layout, mesh, j)
        fxk, fyk = vertex_expr(layout, mesh, k)
        c_expr = Expr().add(fxk, d[0] / l2).add(fxj, -d[0] / l2)
        c_expr.add(fyk, d[1] / l2).add(fyj, -d[1] / l2)
        s_expr = Expr().add(fyk, d[0] / l2).add(fyj, -d[0] / l2)
        s_expr.add(fxk, -d[1] / l2).add(fxj, d[1] / l2)
        c_expr.const -= target_c
        s_expr.const -= target_s
        sys.add_row(c_expr.scaled(w), "global")
        sys.add_row(s_expr.scaled(w), "global")


def overlap_edge_weight_fn(overlap_mask: np.ndarray, beta: float = 0.1,
                           gamma: float = 1.0):
    """w(e) = beta + gamma * normalized distance to the nearest overlap pixel."""
    overlap_mask = np.asarray(overlap_mask).astype(bool)
    h, w = overlap_mask.shape
    diag = math.hypot(w - 1, h - 1)
    if overlap_mask.any():
        dist = ndimage.distance_transform_edt(~overlap_mask)
    else:
        dist = np.full((h, w), diag)

    def fn(mid):
        ci = min(max(int(round(mid[0])), 0), w - 1)
        ri = min(max(int(round(mid[1])), 0), h - 1)
        return beta + gamma * dist[ri, ci] / diag

    return fn


@dataclass
class StructureTargets:
    """Per-object desired positions, refreshed between solver stages."""

    centers: list    # list of (2,) arrays
    samples: list    # list of (Ns, 2) arrays

    def all_points(self) -> np.ndarray:
        if not self.centers:
            return np.zeros((0, 2))
        return np.vstack([np.vstack([c[None, :], s])
                          for c, s in zip(self.centers, self.samples)])


def compute_structure_targets(structs, mesh: GridMesh = None,
                              homography: np.ndarray = None) -> StructureTargets:
    """Desired positions: similarity-project each object's current warp.

    Maps the object's rest points through the current mesh warp (or, at stage
    0 before any solve, through the chained homography), fits one similarity
    per object from rest to warped, and applies it to the rest points.
    """
    centers, samples = [], []
    for st in structs:
        pts = st.all_points()
        if mesh is not None:
            warped = warp_points(mesh, pts)
        elif homography is not None:
            warped = apply_homography(homography, pts)
        else:
            warped = pts
        a, b, tx, ty = fit_similarity(pts, warped)
        rot = np.array([[a, -b], [b, a]])
        desired = pts @ rot.T + np.array([tx, ty])
        centers.append(desired[0])
        samples.append(desired[1:])
    return StructureTargets(centers=centers, samples=samples)


def add_structure_term(sys: EnergySystem, layout: Layout, mesh: GridMesh,
                       structs, targets: StructureTargets = None,
                       lam: float = DEFAULT_LAMBDA_STRUCTURE,
                       strategy: str = "fan", include_center: bool = False) -> None:
    """Similarity-preservation rows for each object.

    fan: for every consecutive boundary pair (Vi, Vi+1) the warped Vi+1 should
    sit at the position reconstructed from the warped center and warped Vi
    using the rest local coordinates. All three points are bilinear in the
    unknowns, so the term vanishes for any similarity of the rest shape.

    chain: the consecutive-boundary-sample variant (no fan center), kept for
    the sampling-strategy ablation.

    include_center additionally anchors the fan center to its desired target
    position (the non-simplified per-triangle energy).
    """
    if strategy not in ("fan", "chain"):
        raise MeshError(f"unknown structure strategy {strategy!r}")
    for oi, st in enumerate(structs):
        n = len(st.samples)
        omega = st.sample_weights
        sample_exprs = [point_expr(layout, mesh, p) for p in st.samples]
        if strategy == "fan":
            v0 = point_expr(layout, mesh, st.center)
            for i in range(n):
                nxt = (i + 1) % n
                x, y = st.local_coords[i]
                w = math.sqrt(lam * omega[nxt])
                vix, viy = sample_exprs[i]
                vnx, vny = sample_exprs[nxt]
                # desired = v0 + x*e + y*R90@e with e = vi - v0,
                # R90@(ex, ey) = (ey, -ex)
                rx = Expr().add(v0[0], 1.0 - x - 0.0)
                rx.add(vix, x)
                rx.add(v0[1], -y).add(viy, y)
                rx.add(vnx, -1.0)
                ry = Expr().add(v0[1], 1.0 - x)
                ry.add(viy, x)
                ry.add(v0[0], y).add(vix, -y)
                ry.add(vny, -1.0)
                sys.add_row(rx.scaled(w), "structure")
                sys.add_row(ry.scaled(w), "structure")
            if include_center and targets is not None:
                w = math.sqrt(lam * float(omega.mean()))
                cx, cy = targets.centers[oi]
                rx = Expr(const=-cx).add(v0[0])
                ry = Expr(const=-cy).add(v0[1])
                sys.add_row(rx.scaled(w), "structure")
                sys.add_row(ry.scaled(w), "structure")
        else:
            for i in range(n):
                a_i, b_i, c_i = (i - 1) % n, i, (i + 1) % n
                xy = masks_mod.local_coordinates(st.samples[a_i], st.samples[b_i],
                                                 st.samples[c_i])
                x, y = xy
                w = math.sqrt(lam * omega[c_i])
                vax, vay = sample_exprs[a_i]
                vbx, vby = sample_exprs[b_i]
                vcx, vcy = sample_exprs[c_i]
                rx = Expr().add(vax, 1.0 - x).add(vbx, x)
                rx.add(vay, -y).add(vby, y)
                rx.add(vcx, -1.0)
                ry = Expr().add(vay, 1.0 - x).add(vby, x)
                ry.add(vax, y).add(vbx, -y)
                ry.add(vcy, -1.0)
                sys.add_row(rx.scaled(w), "structure")
                sys.add_row(ry.scaled(w), "structure")


def assemble(layout: Layout, pair_matches, similarities, structures=None,
             targets=None, lambda_local: float = DEFAULT_LAMBDA_LOCAL,
             lambda_structure: float = DEFAULT_LAMBDA_STRUCTURE,
             weight_fns=None, strategy: str = "fan",
             include_center: bool = False) -> EnergySystem:
    """Build the full multi-image system.

    pair_matches: list of (image_i, image_j, MatchSet) with p in image_i and
    q in image_j. similarities: {image_id: (scale, theta)} for every free
    mesh. structures / targets: {image_id: [...]}, optional. weight_fns:
    {image_id: callable} for the global-term edge weights.
    """
    sys = EnergySystem(n=layout.n, lambdas=(lambda_local, lambda_structure))
    for i, j, m in pair_matches:
        add_alignment_term(sys, layout, m, layout.meshes[i], layout.meshes[j])
    for image_id in sorted(layout.meshes):
        if image_id in layout.fixed:
            continue
        mesh = layout.meshes[image_id]
        add_local_similarity_term(sys, layout, mesh, lambda_local)
        s, theta = similarities[image_id]
        wfn = (weight_fns or {}).get(image_id)
        add_global_similarity_term(sys, layout, mesh, s, theta, wfn)
        if structures and structures.get(image_id):
            tg = targets.get(image_id) if targets else None
            add_structure_term(sys, layout, mesh, structures[image_id], tg,
                               lambda_structure, strategy, include_center)
    return sys

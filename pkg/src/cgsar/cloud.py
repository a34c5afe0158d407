"""Point-cloud stages of the ground-truth workflow.

``dem_to_cloud`` turns every DEM cell into a labelled point (P_dem),
``fill_vertical`` adds wall columns at building height jumps (P_com) and
``hpr_visible`` keeps the points a far-away side-looking sensor can see
(P_svs) using hidden point removal: spherical flipping around a viewpoint on
the line of sight followed by a convex hull.  ``raycast_visible`` is an
independent visibility oracle that marches each point's ray through the DEM
height field.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, cKDTree
from scipy.spatial import QhullError

from .scene import DemGrid, Footprint, FootprintSet, footprint_labels

logger = logging.getLogger(__name__)

GROUND = -1


class HprError(ValueError):
    pass


@dataclass
class PointCloud:
    """Labelled points.  ``labels`` index into ``ids``; ``GROUND`` marks ground.

    ``cells`` keeps the (row, col) of the DEM cell each point came from so
    later stages can recover grid neighbourhoods.
    """

    xyz: np.ndarray
    labels: np.ndarray
    ids: tuple[str, ...] = ()
    cells: np.ndarray | None = None

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int32).reshape(-1)
        if len(self.labels) != len(self.xyz):
            raise ValueError("labels and points differ in length")
        if self.cells is not None:
            self.cells = np.asarray(self.cells, dtype=np.int32).reshape(-1, 2)
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return len(self.xyz)

    def subset(self, mask) -> PointCloud:
        return PointCloud(
            self.xyz[mask],
            self.labels[mask],
            self.ids,
            None if self.cells is None else self.cells[mask],
        )

    def label_of(self, fid: str) -> int:
        return self.ids.index(fid)


@dataclass(frozen=True)
class ViewGeometry:
    incidence_deg: float = 36.0
    heading_deg: float = 194.34
    look: str = "right"

    def __post_init__(self):
        if not 0.0 < self.incidence_deg < 90.0:
            raise ValueError("incidence angle must lie strictly inside (0, 90) degrees")
        if not 0.0 <= self.heading_deg < 360.0:
            raise ValueError("heading must lie in [0, 360) degrees")
        if self.look not in ("left", "right"):
            raise ValueError("look must be 'left' or 'right'")

    @property
    def theta(self) -> float:
        return math.radians(self.incidence_deg)

    def flight_direction(self) -> np.ndarray:
        """Horizontal unit vector along track (east, north); heading clockwise from north."""
        psi = math.radians(self.heading_deg)
        return np.array([math.sin(psi), math.cos(psi)])

    def ground_range_direction(self) -> np.ndarray:
        """Horizontal unit vector pointing away from the sensor (towards far range)."""
        a = self.flight_direction()
        right = np.array([a[1], -a[0]])
        return right if self.look == "right" else -right


@dataclass(frozen=True)
class VerticalFillParams:
    h_step: float = 0.25
    jump_threshold: float = 2.0

    def __post_init__(self):
        if not (self.h_step > 0 and self.jump_threshold > 0):
            raise ValueError("h_step and jump_threshold must be positive")
        if self.h_step > self.jump_threshold:
            raise ValueError("h_step must not exceed jump_threshold")


def line_of_sight(view: ViewGeometry) -> np.ndarray:
    """Unit vector from the sensor towards the scene."""
    g = view.ground_range_direction()
    st, ct = math.sin(view.theta), math.cos(view.theta)
    return np.array([st * g[0], st * g[1], -ct])


def dem_to_cloud(dem: DemGrid, footprints: FootprintSet) -> PointCloud:
    labels = footprint_labels(dem, footprints)
    rows, cols = np.nonzero(dem.valid)
    xs, ys = dem.grid.centers()
    xyz = np.column_stack([xs[cols], ys[rows], dem.heights[rows, cols]])
    return PointCloud(
        xyz, labels[rows, cols], tuple(fp.id for fp in footprints), np.column_stack([rows, cols])
    )


def fill_vertical(p_dem: PointCloud, params: VerticalFillParams = VerticalFillParams()) -> PointCloud:
    """Add wall points under building points that sit on a height jump.

    For a building point whose 4-neighbourhood (itself included) spans
    heights ``h0..he`` with ``he - h0 > jump_threshold``, points at
    ``h0 + i * h_step`` (i = 1, 2, ...) strictly below ``he`` are appended with
    the same (x, y) and label.  Ground points never receive walls.
    """
    if p_dem.cells is None:
        raise ValueError("fill_vertical needs a cloud built from a DEM (cells missing)")
    cells = p_dem.cells
    nr, nc = cells.max(axis=0) + 1
    grid = np.full((nr + 2, nc + 2), np.nan)
    grid[cells[:, 0] + 1, cells[:, 1] + 1] = p_dem.xyz[:, 2]
    r, c = cells[:, 0] + 1, cells[:, 1] + 1
    stack = np.stack(
        [grid[r, c], grid[r - 1, c], grid[r + 1, c], grid[r, c - 1], grid[r, c + 1]]
    )
    h0 = np.nanmin(stack, axis=0)
    he = np.nanmax(stack, axis=0)
    jump = (p_dem.labels != GROUND) & (he - h0 > params.jump_threshold)
    idx = np.nonzero(jump)[0]
    if len(idx) == 0:
        return p_dem.subset(slice(None))
    counts = np.maximum(np.ceil((he[idx] - h0[idx]) / params.h_step).astype(int), 1)
    src = np.repeat(idx, counts)
    step_i = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts) + 1
    hs = h0[src] + step_i * params.h_step
    keep = hs < he[src]
    src, hs = src[keep], hs[keep]
    wall = np.column_stack([p_dem.xyz[src, 0], p_dem.xyz[src, 1], hs])
    return PointCloud(
        np.vstack([p_dem.xyz, wall]),
        np.concatenate([p_dem.labels, p_dem.labels[src]]),
        p_dem.ids,
        np.vstack([cells, cells[src]]),
    )


# --------------------------------------------------------------------------
# hidden point removal


def _affine_rank(pts: np.ndarray, scale: float) -> int:
    if len(pts) < 2:
        return 0
    sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    return int(np.sum(sv > 1e-12 * max(scale, 1e-300) * math.sqrt(len(pts))))


def hpr_mask(
    xyz: np.ndarray,
    direction: np.ndarray,
    far_multiple: float = 100.0,
    radius_exponent: float = 4.8,
    coplanar_tol: float = 1e-9,
) -> np.ndarray:
    """Boolean visibility of ``xyz`` seen along ``direction`` from far away.

    The viewpoint C sits ``far_multiple`` scene diameters up-beam of the
    centroid.  Points are flipped on a sphere of radius
    ``R = 10**radius_exponent * max|p - C|``; a point is visible when its
    image lies on the convex hull of the images plus C, or within
    ``coplanar_tol * R`` of a hull facet not incident to C.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    n = len(xyz)
    if n == 0:
        raise HprError("empty point cloud")
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    center = xyz.mean(axis=0)
    diameter = float(np.linalg.norm(xyz.max(axis=0) - xyz.min(axis=0)))
    if n > 1 and diameter == 0.0:
        raise HprError("all points coincide; convex hull is degenerate")
    viewpoint = center - far_multiple * max(diameter, 1.0) * d

    q = xyz - viewpoint
    r = np.linalg.norm(q, axis=1)
    radius = 10.0**radius_exponent * r.max()
    flipped = q + (2.0 * (radius - r) / r)[:, None] * q
    tol = coplanar_tol * radius
    shift = flipped.mean(axis=0)
    g = flipped - shift  # hull in cap-centred coordinates keeps precision
    c = -shift  # viewpoint in the same frame

    scale = float(np.abs(g).max()) if n > 1 else 1.0
    rank_f = _affine_rank(g, scale)
    rank_all = _affine_rank(np.vstack([g, c]), max(scale, float(np.abs(c).max())))
    if rank_all <= 1:
        # everything on one ray from C: only the image farthest from C survives
        t = g @ (-c) / max(np.linalg.norm(c), 1e-300)
        return t >= t.max() - tol
    if rank_f < rank_all:
        # images span a lower-dimensional face of the hull, all of it visible
        return np.ones(n, dtype=bool)
    if rank_all == 2:
        return _hpr_planar(g, c, tol)

    hull = ConvexHull(g)
    eq = hull.equations
    keep = eq[:, :3] @ c + eq[:, 3] < 0.0  # C strictly beneath the facet
    visible = np.zeros(n, dtype=bool)
    kept = hull.simplices[keep]
    visible[np.unique(kept)] = True
    if tol > 0:
        _near_facets(g, xyz, visible, kept, eq[keep], tol)
    return visible


def _hpr_planar(g: np.ndarray, c: np.ndarray, tol: float) -> np.ndarray:
    origin = g.mean(axis=0)
    _, _, vt = np.linalg.svd(np.vstack([g, c]) - origin)
    basis = vt[:2]
    g2 = (g - origin) @ basis.T
    c2 = (c - origin) @ basis.T
    pts = np.vstack([g2, c2])
    hull = ConvexHull(pts)
    ci = len(g2)
    visible = np.zeros(len(g2), dtype=bool)
    for simplex, eq in zip(hull.simplices, hull.equations):
        if ci in simplex:
            continue
        dist = g2 @ eq[:2] + eq[2]
        visible |= dist >= -tol
    return visible


def _near_facets(g, xyz, visible, kept, eq, tol, k: int = 4) -> None:
    """Mark non-vertex points lying within ``tol`` of a kept facet near them."""
    cand = np.nonzero(~visible)[0]
    verts = np.nonzero(visible)[0]
    if len(cand) == 0 or len(verts) == 0:
        return
    # vertex -> incident kept facets (CSR)
    flat_v = kept.ravel()
    flat_f = np.repeat(np.arange(len(kept)), 3)
    order = np.argsort(flat_v, kind="stable")
    flat_v, flat_f = flat_v[order], flat_f[order]
    starts = np.searchsorted(flat_v, verts)
    ends = np.searchsorted(flat_v, verts, side="right")

    tree = cKDTree(xyz[verts])
    k = min(k, len(verts))
    _, nn = tree.query(xyz[cand], k=k)
    nn = nn.reshape(len(cand), k)
    best = np.full(len(cand), -np.inf)
    for j in range(k):
        s, e = starts[nn[:, j]], ends[nn[:, j]]
        cnt = e - s
        owner = np.repeat(np.arange(len(cand)), cnt)
        pos = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt) + np.repeat(s, cnt)
        fac = flat_f[pos]
        dist = np.einsum("ij,ij->i", eq[fac, :3], g[cand[owner]]) + eq[fac, 3]
        np.maximum.at(best, owner, dist)
    visible[cand[best >= -tol]] = True


def hpr_visible(
    p_com: PointCloud,
    view: ViewGeometry,
    far_multiple: float = 100.0,
    radius_exponent: float = 4.8,
    coplanar_tol: float = 1e-9,
) -> PointCloud:
    mask = hpr_mask(p_com.xyz, line_of_sight(view), far_multiple, radius_exponent, coplanar_tol)
    return p_com.subset(mask)


def hpr_mask_tiled(
    xyz: np.ndarray,
    view: ViewGeometry,
    tile: float = 40.0,
    margin: float = 5.0,
    far_multiple: float = 100.0,
    radius_exponent: float = 4.8,
    coplanar_tol: float = 1e-9,
) -> np.ndarray:
    """HPR over square tiles in (ground-range, azimuth) coordinates.

    Every tile is processed together with its surroundings: ``margin`` metres
    on all sides plus the full shadow length of the tallest point on the
    near-range side, where occluders live.  Only core points take their
    result from a tile, so each point is classified exactly once.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    d = line_of_sight(view)
    g_dir = view.ground_range_direction()
    a_dir = view.flight_direction()
    gr = xyz[:, :2] @ g_dir
    az = xyz[:, :2] @ a_dir
    near_margin = margin + max(xyz[:, 2].max() - xyz[:, 2].min(), 0.0) * math.tan(view.theta)
    g0, a0 = gr.min(), az.min()
    ti = np.floor((gr - g0) / tile).astype(int)
    tj = np.floor((az - a0) / tile).astype(int)
    visible = np.zeros(len(xyz), dtype=bool)
    for i in range(ti.max() + 1):
        glo, ghi = g0 + i * tile, g0 + (i + 1) * tile
        band = (gr >= glo - near_margin) & (gr < ghi + margin)
        for j in range(tj.max() + 1):
            core = (ti == i) & (tj == j)
            if not core.any():
                continue
            alo, ahi = a0 + j * tile, a0 + (j + 1) * tile
            sel = band & (az >= alo - margin) & (az < ahi + margin)
            idx = np.nonzero(sel)[0]
            m = hpr_mask(xyz[idx], d, far_multiple, radius_exponent, coplanar_tol)
            is_core = core[idx]
            visible[idx[is_core]] = m[is_core]
    return visible


def raycast_visible(cloud: PointCloud, dem: DemGrid, view: ViewGeometry, substeps: int = 8) -> np.ndarray:
    """Brute-force occlusion oracle on the surface spanned by the DEM samples.

    Points live at cell centres, so the surface they sample has its edges at
    cell centres too: the height at a location is the minimum of the four
    cell-centre heights around it (roofs span the dual cells whose four
    corners are all elevated, walls hang on the centre lines of edge cells).
    Each point is marched towards the sensor in steps of
    ``cellsize/substeps`` and reported hidden once the ray passes below that
    surface.
    """
    d = line_of_sight(view)
    heights = np.where(dem.valid, dem.heights, -np.inf)
    pad = np.full((dem.nrows + 1, dem.ncols + 1), -np.inf)
    pad[:-1, :-1] = heights
    # dual[i, j] covers the square between centres (i, j) and (i+1, j+1)
    dual = np.minimum(np.minimum(pad[:-1, :-1], pad[1:, :-1]), np.minimum(pad[:-1, 1:], pad[1:, 1:]))
    top = heights.max()
    xyz = cloud.xyz
    length = np.maximum(top - xyz[:, 2], 0.0) / -d[2]
    step = dem.cellsize / substeps
    grid = dem.grid
    vis = np.ones(len(xyz), dtype=bool)
    nsteps = int(math.ceil(length.max() / step)) + 1
    for k in range(1, nsteps + 1):
        t = k * step
        active = vis & (t <= length + step)
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        q = xyz[idx] - t * d
        u, v = grid.to_index(q[:, 0], q[:, 1])
        col = np.floor(u).astype(int)
        row = np.floor(v).astype(int)
        inside = (row >= 0) & (row < dem.nrows) & (col >= 0) & (col < dem.ncols)
        h = np.full(len(idx), -np.inf)
        h[inside] = dual[row[inside], col[inside]]
        hidden = q[:, 2] < h - 1e-9
        vis[idx[hidden]] = False
    return vis


# --------------------------------------------------------------------------


def select_building_points(
    p_svs: PointCloud,
    footprint: Footprint,
    jump_threshold: float = 2.0,
    ground_buffer: float = 5.0,
) -> PointCloud | None:
    """Visible points of one building, or ``None`` when it must be excluded.

    A footprint is excluded when none of its points rises more than
    ``jump_threshold`` above the median height of ground points within
    ``ground_buffer`` metres of its bounding box.
    """
    if footprint.id not in p_svs.ids:
        return None
    label = p_svs.label_of(footprint.id)
    mine = p_svs.labels == label
    if not mine.any():
        return None
    lo = footprint.ring.min(axis=0) - ground_buffer
    hi = footprint.ring.max(axis=0) + ground_buffer
    xy = p_svs.xyz[:, :2]
    near = (p_svs.labels == GROUND) & np.all((xy >= lo) & (xy <= hi), axis=1)
    ground = float(np.median(p_svs.xyz[near, 2])) if near.any() else 0.0
    if not np.any(p_svs.xyz[mine, 2] > ground + jump_threshold):
        return None
    return p_svs.subset(mine)


def save_cloud_txt(cloud: PointCloud, path) -> None:
    names = np.array(["ground", *cloud.ids], dtype=object)
    with open(path, "w") as fh:
        for (x, y, h), lab in zip(cloud.xyz.tolist(), names[cloud.labels + 1]):
            fh.write(f"{x!r} {y!r} {h!r} {lab}\n")

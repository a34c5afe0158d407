"""Synthetic urban scenes: a 2.5D DEM plus GIS building footprints.

The ground is a flat plane at height 0 and every building is a flat-roofed
prism extruded from its footprint, so DEM cells whose centre falls inside a
footprint carry that building's roof height.  Also holds the ESRI ASCII grid
and footprint JSON readers/writers and the polygon rasterizer shared by the
DEM extrusion and the SAR-plane mask builders.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from shapely.geometry import Polygon

logger = logging.getLogger(__name__)


class SceneError(ValueError):
    """Invalid scene input or a scene that cannot be generated."""


class DemParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class GridDef:
    """Regular grid geometry.

    ``(x0, y0)`` is the outer corner of cell ``(row 0, col 0)``; ``dx``/``dy``
    are signed steps per column/row.  Cell ``(r, c)`` has its centre at
    ``(x0 + (c + 0.5) * dx, y0 + (r + 0.5) * dy)``.
    """

    x0: float
    y0: float
    dx: float
    dy: float
    ncols: int
    nrows: int

    def __post_init__(self):
        if self.dx == 0 or self.dy == 0:
            raise SceneError("grid cell size must be non-zero")
        if self.ncols < 0 or self.nrows < 0:
            raise SceneError("grid dimensions must be non-negative")

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        xs = self.x0 + (np.arange(self.ncols) + 0.5) * self.dx
        ys = self.y0 + (np.arange(self.nrows) + 0.5) * self.dy
        return xs, ys

    def to_index(self, x, y):
        """Continuous (col, row) coordinates with cell centres at integers."""
        u = (np.asarray(x, dtype=float) - self.x0) / self.dx - 0.5
        v = (np.asarray(y, dtype=float) - self.y0) / self.dy - 0.5
        return u, v


@dataclass
class DemGrid:
    ncols: int
    nrows: int
    origin_x: float
    origin_y: float
    cellsize: float
    nodata: float
    heights: np.ndarray  # (nrows, ncols), row 0 is the northern edge

    def __post_init__(self):
        self.heights = np.asarray(self.heights, dtype=np.float64)
        if self.ncols < 1 or self.nrows < 1:
            raise SceneError("DEM needs at least one row and one column")
        if not self.cellsize > 0:
            raise SceneError("DEM cellsize must be positive")
        if self.heights.shape != (self.nrows, self.ncols):
            raise SceneError(
                f"heights shape {self.heights.shape} != ({self.nrows}, {self.ncols})"
            )
        valid = self.heights != self.nodata
        if not np.all(np.isfinite(self.heights[valid])):
            raise SceneError("DEM contains non-finite heights")

    @property
    def grid(self) -> GridDef:
        return GridDef(
            self.origin_x,
            self.origin_y + self.nrows * self.cellsize,
            self.cellsize,
            -self.cellsize,
            self.ncols,
            self.nrows,
        )

    @property
    def valid(self) -> np.ndarray:
        return self.heights != self.nodata


@dataclass
class Footprint:
    id: str
    ring: np.ndarray  # (n, 2) CCW, closing vertex implicit
    gt_height: float | None = None

    def __post_init__(self):
        self.ring = np.asarray(self.ring, dtype=np.float64).reshape(-1, 2)
        if len(self.ring) < 3:
            raise SceneError(f"footprint {self.id}: ring needs at least 3 vertices")

    @property
    def area(self) -> float:
        return signed_area(self.ring)

    def edges(self) -> np.ndarray:
        """(n, 2, 2) array of directed edges in ring order."""
        return np.stack([self.ring, np.roll(self.ring, -1, axis=0)], axis=1)


FootprintSet = list[Footprint]


@dataclass
class SceneSpec:
    seed: int = 0
    extent: tuple[float, float] = (200.0, 200.0)
    n_buildings: int = 20
    shape_mix: tuple[float, float] = (0.7, 0.3)  # rectangle, L-shape
    height_range: tuple[float, float] = (4.0, 30.0)
    touch_fraction: float = 0.1
    dem_cellsize: float = 0.5
    width_range: tuple[float, float] = (8.0, 20.0)
    length_range: tuple[float, float] = (8.0, 20.0)
    min_gap: float = 2.0
    margin: float = 2.0
    max_tries: int = 400

    def validate(self) -> None:
        if self.n_buildings < 1:
            raise SceneError("n_buildings must be >= 1")
        if any(not 0 <= f <= 1 for f in self.shape_mix) or not math.isclose(
            sum(self.shape_mix), 1.0
        ):
            raise SceneError("shape_mix fractions must lie in [0, 1] and sum to 1")
        if not 0 <= self.touch_fraction <= 1:
            raise SceneError("touch_fraction must lie in [0, 1]")
        lo, hi = self.height_range
        if not (0 < lo <= hi):
            raise SceneError("height_range must be positive and ordered")
        for name in ("width_range", "length_range"):
            a, b = getattr(self, name)
            if not (0 < a <= b):
                raise SceneError(f"{name} must be positive and ordered")
        if not self.dem_cellsize > 0:
            raise SceneError("dem_cellsize must be positive")
        if min(self.extent) <= 0:
            raise SceneError("extent must be positive")


def signed_area(ring) -> float:
    ring = np.asarray(ring, dtype=float)
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def ensure_ccw(ring) -> np.ndarray:
    ring = np.asarray(ring, dtype=float)
    return ring[::-1].copy() if signed_area(ring) < 0 else ring


def is_simple(ring) -> bool:
    ring = np.asarray(ring, dtype=float)
    if len(np.unique(ring, axis=0)) < 3:
        return False
    return Polygon(ring).is_valid


# --------------------------------------------------------------------------
# rasterization


def rasterize_polygon(ring, grid: GridDef) -> np.ndarray:
    """Boolean (nrows, ncols) mask of cells whose centre is inside ``ring``.

    Even-odd scanline fill evaluated at cell centres.  A centre lying exactly
    on an edge belongs to the polygon when the edge is a top or left edge in
    index space (half-open ``[v_min, v_max)`` rows, ``[u_left, u_right)``
    columns).
    """
    mask = np.zeros((grid.nrows, grid.ncols), dtype=bool)
    ring = np.asarray(ring, dtype=float)
    if len(ring) < 3 or abs(signed_area(ring)) < 1e-12:
        logger.warning("degenerate polygon rasterized to an empty mask")
        return mask
    u, v = grid.to_index(ring[:, 0], ring[:, 1])
    r_lo = max(int(math.ceil(v.min())), 0)
    r_hi = min(int(math.floor(v.max())), grid.nrows - 1)
    if r_lo > r_hi or grid.ncols == 0:
        return mask
    u0, v0 = u, v
    u1, v1 = np.roll(u, -1), np.roll(v, -1)
    rows = np.arange(r_lo, r_hi + 1, dtype=float)[:, None]
    vmin = np.minimum(v0, v1)[None, :]
    vmax = np.maximum(v0, v1)[None, :]
    crosses = (rows >= vmin) & (rows < vmax)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rows - v0[None, :]) / (v1 - v0)[None, :]
    xs = np.where(crosses, u0[None, :] + t * (u1 - u0)[None, :], np.inf)
    xs.sort(axis=1)
    ncross = crosses.sum(axis=1)
    diff = np.zeros((len(rows), grid.ncols + 1), dtype=np.int32)
    for k in range(0, int(ncross.max()), 2):
        has = ncross > k + 1
        if not has.any():
            break
        ri = np.nonzero(has)[0]
        left = np.clip(np.ceil(xs[ri, k]), 0, grid.ncols).astype(int)
        right = np.clip(np.ceil(xs[ri, k + 1]), 0, grid.ncols).astype(int)
        np.add.at(diff, (ri, left), 1)
        np.add.at(diff, (ri, right), -1)
    mask[r_lo : r_hi + 1] = np.cumsum(diff[:, :-1], axis=1) > 0
    return mask


# --------------------------------------------------------------------------
# generation


def _rotate(pts: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return pts @ np.array([[c, s], [-s, c]])


def _rectangle(w: float, l: float) -> np.ndarray:
    return np.array([[0, 0], [w, 0], [w, l], [0, l]], dtype=float) - [w / 2, l / 2]


def _l_shape(w: float, l: float, rng: np.random.Generator) -> np.ndarray:
    cw = w * rng.uniform(0.35, 0.6)
    cl = l * rng.uniform(0.35, 0.6)
    pts = np.array(
        [[0, 0], [w, 0], [w, l - cl], [w - cw, l - cl], [w - cw, l], [0, l]],
        dtype=float,
    )
    return pts - [w / 2, l / 2]


def _attached_rectangle(ring: np.ndarray, edge: int, depth: float) -> np.ndarray:
    """Rectangle sharing edge ``edge`` of the CCW ``ring`` exactly, on its outside."""
    p = ring[edge]
    q = ring[(edge + 1) % len(ring)]
    d = q - p
    n = np.array([d[1], -d[0]]) / np.hypot(*d)
    return np.array([q, p, p + n * depth, q + n * depth])


def generate_scene(spec: SceneSpec) -> tuple[DemGrid, FootprintSet]:
    """Place flat-roofed buildings on a flat plane and extrude them into a DEM."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    W, H = spec.extent
    n_pairs = min(int(round(spec.touch_fraction * spec.n_buildings / 2)), spec.n_buildings // 2)
    units = [2] * n_pairs + [1] * (spec.n_buildings - 2 * n_pairs)

    placed: list[Polygon] = []
    rings: list[np.ndarray] = []
    for size in units:
        for _ in range(spec.max_tries):
            w = rng.uniform(*spec.width_range)
            l = rng.uniform(*spec.length_range)
            base = _l_shape(w, l, rng) if rng.random() < spec.shape_mix[1] else _rectangle(w, l)
            angle = rng.uniform(0.0, math.pi)
            center = rng.uniform([0, 0], [W, H])
            unit = [_rotate(base, angle) + center]
            if size == 2:
                lengths = np.hypot(*np.diff(np.vstack([unit[0], unit[0][:1]]), axis=0).T)
                ok = np.nonzero(lengths >= spec.width_range[0] * 0.5)[0]
                edge = int(rng.choice(ok))
                depth = rng.uniform(*spec.length_range)
                unit.append(_attached_rectangle(unit[0], edge, depth))
            polys = [Polygon(r) for r in unit]
            union_bounds = np.vstack(unit)
            if (
                union_bounds.min(axis=0) < spec.margin
            ).any() or (union_bounds.max(axis=0) > [W - spec.margin, H - spec.margin]).any():
                continue
            if any(p.distance(q) < spec.min_gap for p in polys for q in placed):
                continue
            placed.extend(polys)
            rings.extend(ensure_ccw(r) for r in unit)
            break
        else:
            raise SceneError(
                f"could not place building {len(rings) + 1} of {spec.n_buildings} "
                f"after {spec.max_tries} tries; enlarge extent or reduce n_buildings"
            )

    lo, hi = spec.height_range
    footprints = [
        Footprint(f"b{i:04d}", ring, float(rng.uniform(lo, hi))) for i, ring in enumerate(rings)
    ]
    cs = spec.dem_cellsize
    dem = DemGrid(
        ncols=int(math.ceil(W / cs)),
        nrows=int(math.ceil(H / cs)),
        origin_x=0.0,
        origin_y=0.0,
        cellsize=cs,
        nodata=-9999.0,
        heights=np.zeros((int(math.ceil(H / cs)), int(math.ceil(W / cs)))),
    )
    extrude_footprints(dem, footprints)
    return dem, footprints


def extrude_footprints(dem: DemGrid, footprints: FootprintSet) -> None:
    """Write each footprint's ``gt_height`` into the DEM cells it covers (in place)."""
    grid = dem.grid
    for fp in footprints:
        if fp.gt_height is None:
            continue
        dem.heights[rasterize_polygon(fp.ring, grid)] = fp.gt_height


def footprint_labels(dem: DemGrid, footprints: FootprintSet) -> np.ndarray:
    """Per-cell footprint index (-1 for cells outside every footprint)."""
    labels = np.full((dem.nrows, dem.ncols), -1, dtype=np.int32)
    grid = dem.grid
    for i, fp in enumerate(footprints):
        labels[rasterize_polygon(fp.ring, grid) & (labels < 0)] = i
    return labels


# --------------------------------------------------------------------------
# ESRI ASCII grid

_DEM_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


def save_dem(dem: DemGrid, path) -> None:
    lines = [
        f"ncols {dem.ncols}",
        f"nrows {dem.nrows}",
        f"xllcorner {float(dem.origin_x)!r}",
        f"yllcorner {float(dem.origin_y)!r}",
        f"cellsize {float(dem.cellsize)!r}",
        f"NODATA_value {float(dem.nodata)!r}",
    ]
    lines.extend(" ".join(map(repr, row)) for row in dem.heights.tolist())
    Path(path).write_text("\n".join(lines) + "\n")


def load_dem(path) -> DemGrid:
    text = Path(path).read_text().splitlines()
    header: dict[str, str] = {}
    lineno = 0
    for lineno, line in enumerate(text, start=1):
        parts = line.split()
        if not parts:
            continue
        key = parts[0].lower()
        if key not in _DEM_KEYS:
            lineno -= 1
            break
        if len(parts) != 2:
            raise DemParseError(f"malformed header entry {line.strip()!r}", lineno)
        header[key] = parts[1]
    else:
        lineno = len(text)
    for key in _DEM_KEYS:
        if key not in header:
            name = "NODATA_value" if key == "nodata_value" else key
            raise DemParseError(f"missing header field '{name}'")
    try:
        ncols, nrows = int(header["ncols"]), int(header["nrows"])
        xll, yll = float(header["xllcorner"]), float(header["yllcorner"])
        cellsize, nodata = float(header["cellsize"]), float(header["nodata_value"])
    except ValueError as exc:
        raise DemParseError(f"non-numeric header value: {exc}") from None

    values: list[float] = []
    last = lineno
    for i in range(lineno, len(text)):
        for tok in text[i].split():
            try:
                values.append(float(tok))
            except ValueError:
                raise DemParseError(f"non-numeric cell value {tok!r}", i + 1) from None
        if text[i].strip():
            last = i + 1
    if len(values) != ncols * nrows:
        raise DemParseError(
            f"expected {ncols * nrows} cell values, found {len(values)}", last
        )
    try:
        return DemGrid(
            ncols, nrows, xll, yll, cellsize, nodata, np.array(values).reshape(nrows, ncols)
        )
    except SceneError as exc:
        raise DemParseError(str(exc)) from None


# --------------------------------------------------------------------------
# footprint JSON


def save_footprints(footprints: FootprintSet, path) -> None:
    records = []
    for fp in footprints:
        rec = {"id": fp.id, "ring": fp.ring.tolist()}
        if fp.gt_height is not None:
            rec["gt_height"] = fp.gt_height
        records.append(rec)
    Path(path).write_text(json.dumps(records, indent=1), encoding="utf-8")


def load_footprints(path) -> FootprintSet:
    records = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(records, list):
        raise SceneError("footprint file must hold a JSON array")
    seen: set[str] = set()
    out = []
    for rec in records:
        fid = str(rec["id"])
        if fid in seen:
            raise SceneError(f"duplicate footprint id: {fid}")
        seen.add(fid)
        ring = np.asarray(rec["ring"], dtype=float).reshape(-1, 2)
        if len(ring) > 3 and np.array_equal(ring[0], ring[-1]):
            ring = ring[:-1]
        if len(ring) < 3:
            raise SceneError(f"footprint {fid}: ring needs at least 3 vertices")
        if not is_simple(ring):
            raise SceneError(f"footprint {fid}: ring is self-intersecting or degenerate")
        h = rec.get("gt_height")
        out.append(Footprint(fid, ensure_ccw(ring), None if h is None else float(h)))
    return out

"""Building heights from layover extent and LoD1 prism meshes."""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .scene import Footprint, signed_area

logger = logging.getLogger(__name__)


@dataclass
class LayoverMeasure:
    length: float  # metres along slant range
    rows: int  # azimuth rows that contributed
    skipped: int  # rows dropped because the run met another footprint
    flag: str | None = None


def measure_layover(pred: np.ndarray, cbf: np.ndarray, spacing_rg: float, others: np.ndarray | None = None) -> LayoverMeasure:
    """Median near-range run of ``pred`` outside ``cbf``, per azimuth row.

    For every row crossing the footprint the run starts at the pixel just
    before the footprint's nearest column and extends towards near range
    while ``pred`` is set.  Rows whose run ends against ``others`` (pixels of
    neighbouring footprints) are skipped; the building is flagged when more
    than half of its rows are.
    """
    pred = np.asarray(pred, dtype=bool)
    cbf = np.asarray(cbf, dtype=bool)
    if not cbf.any():
        raise ValueError("footprint mask is empty")
    if not pred.any():
        return LayoverMeasure(0.0, 0, 0, "empty prediction")
    outside = pred & ~cbf
    runs = []
    skipped = 0
    rows = np.nonzero(cbf.any(axis=1))[0]
    for r in rows:
        c0 = int(np.argmax(cbf[r]))
        line = outside[r, :c0][::-1]
        n = int(np.argmin(line)) if not line.all() else len(line)
        if others is not None and n > 0:
            end = c0 - n - 1
            if end >= 0 and others[r, end]:
                skipped += 1
                continue
        runs.append(n)
    flag = None
    if skipped * 2 > len(rows):
        flag = "layover merges with a neighbour in most rows"
    if not runs:
        return LayoverMeasure(0.0, 0, skipped, flag or "no usable rows")
    return LayoverMeasure(float(np.median(runs)) * spacing_rg, len(runs), skipped, flag)


def layover_length(pred: np.ndarray, cbf: np.ndarray, spacing_rg: float) -> float:
    return measure_layover(pred, cbf, spacing_rg).length


def height_from_layover(length: float, incidence_deg: float) -> float:
    if not 0.0 <= incidence_deg < 90.0:
        raise ValueError("incidence angle must lie in [0, 90) degrees")
    return length / math.cos(math.radians(incidence_deg))


@dataclass
class HeightEstimate:
    building_id: str
    l: float
    h: float
    gt_h: float

    @property
    def error(self) -> float:
        return self.h - self.gt_h


def height_error_stats(estimates: list[HeightEstimate]) -> tuple[float, list[tuple[int, int]]]:
    """Mean absolute error and a histogram with 1 m bins centred on integers."""
    if not estimates:
        raise ValueError("no height estimates")
    err = np.array([e.error for e in estimates])
    counts = Counter(int(math.floor(x + 0.5)) for x in err)
    lo, hi = min(counts), max(counts)
    return float(np.mean(np.abs(err))), [(b, counts.get(b, 0)) for b in range(lo, hi + 1)]


def write_heights_csv(path, estimates: list[HeightEstimate]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "l", "h", "gt_h", "error"])
        for e in estimates:
            w.writerow([e.building_id, repr(e.l), repr(e.h), repr(e.gt_h), repr(e.error)])


def write_histogram_csv(path, hist: list[tuple[int, int]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_center", "count"])
        w.writerows(hist)


# --------------------------------------------------------------------------
# prism meshes


@dataclass
class Mesh:
    vertices: np.ndarray  # (n, 3)
    faces: list[tuple[int, ...]]  # 0-based, outward-facing (CCW seen from outside)
    flags: list[str] = field(default_factory=list)

    def triangles(self) -> np.ndarray:
        tris = []
        for f in self.faces:
            for k in range(1, len(f) - 1):
                tris.append((f[0], f[k], f[k + 1]))
        return np.array(tris, dtype=int)

    def volume(self) -> float:
        v = self.vertices[self.triangles()]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)

    def is_closed(self) -> bool:
        """Every directed edge is matched by exactly one opposite edge."""
        edges = Counter()
        for f in self.faces:
            for a, b in zip(f, f[1:] + f[:1]):
                edges[(a, b)] += 1
        return all(n == 1 and edges.get((b, a), 0) == 1 for (a, b), n in edges.items())


def _is_ear(ring, prev, cur, nxt, others) -> bool:
    a, b, c = ring[prev], ring[cur], ring[nxt]
    cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    if cross <= 0:
        return False
    for k in others:
        p = ring[k]
        d1 = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
        d2 = (c[0] - b[0]) * (p[1] - b[1]) - (c[1] - b[1]) * (p[0] - b[0])
        d3 = (a[0] - c[0]) * (p[1] - c[1]) - (a[1] - c[1]) * (p[0] - c[0])
        if d1 >= 0 and d2 >= 0 and d3 >= 0:
            return False
    return True


def ear_clip(ring) -> list[tuple[int, int, int]]:
    """Triangulate a simple CCW polygon; triangles are CCW."""
    ring = np.asarray(ring, dtype=float)
    idx = list(range(len(ring)))
    tris = []
    guard = 0
    while len(idx) > 3:
        n = len(idx)
        for k in range(n):
            prev, cur, nxt = idx[k - 1], idx[k], idx[(k + 1) % n]
            others = [j for j in idx if j not in (prev, cur, nxt)]
            if _is_ear(ring, prev, cur, nxt, others):
                tris.append((prev, cur, nxt))
                del idx[k]
                break
        else:
            # only collinear vertices left; drop the flattest one
            guard += 1
            if guard > len(ring):
                raise ValueError("polygon cannot be triangulated")
            del idx[0]
    tris.append(tuple(idx))
    return tris


def extrude_lod1(footprint: Footprint, h: float) -> Mesh:
    if h < 0:
        raise ValueError("height must be non-negative")
    ring = np.asarray(footprint.ring, dtype=float)
    n = len(ring)
    if n < 3 or signed_area(ring) <= 0:
        raise ValueError(f"footprint {footprint.id} is degenerate")
    verts = np.vstack([np.column_stack([ring, np.zeros(n)]), np.column_stack([ring, np.full(n, h)])])
    caps = ear_clip(ring)
    faces: list[tuple[int, ...]] = [(c, b, a) for a, b, c in caps]  # floor faces down
    faces += [(a + n, b + n, c + n) for a, b, c in caps]
    faces += [(i, (i + 1) % n, (i + 1) % n + n, i + n) for i in range(n)]
    mesh = Mesh(verts, faces)
    if h == 0:
        mesh.flags.append("flat prism (zero height)")
        logger.warning("footprint %s extruded with zero height", footprint.id)
    return mesh


def write_obj(path, mesh: Mesh, name: str | None = None) -> None:
    with open(path, "w") as fh:
        if name:
            fh.write(f"o {name}\n")
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for f in mesh.faces:
            fh.write("f " + " ".join(str(i + 1) for i in f) + "\n")


def read_obj(path) -> Mesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(t) for t in parts[1:4]])
            elif parts[0] == "f":
                faces.append(tuple(int(t.split("/")[0]) - 1 for t in parts[1:]))
    return Mesh(np.array(verts, dtype=float).reshape(-1, 3), faces)

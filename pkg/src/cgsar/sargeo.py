"""SAR image geometry: far-field projection, masks, intensity simulation.

Image rasters are indexed ``[azimuth row, slant-range column]``.  Pixel
``(i, j)`` is centred on the continuous coordinate ``(az, rg) = (i, j)``.
Projection is the zero-Doppler far-field model over a flat earth:

    az = ((p - c) . a - origin_az) / spacing_az
    rg = ((p - c) . g * sin(theta) - h * cos(theta) - origin_rg) / spacing_rg

with ``a`` the flight direction, ``g`` the ground-range direction and ``c``
the scene centre, so elevated points move towards near range (layover).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .cloud import PointCloud, ViewGeometry
from .scene import Footprint, FootprintSet, GridDef, rasterize_polygon

logger = logging.getLogger(__name__)

SPACING_AZ = 0.871
SPACING_RG = 0.455
SPECKLE_FLOOR = 0.05
_SQUARE = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class SarFrame:
    spacing_az: float
    spacing_rg: float
    view: ViewGeometry
    origin_az: float
    origin_rg: float
    width: int  # range columns
    height: int  # azimuth rows
    center_x: float = 0.0
    center_y: float = 0.0

    def __post_init__(self):
        if not (self.spacing_az > 0 and self.spacing_rg > 0):
            raise ValueError("pixel spacings must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("frame must be at least 1x1 pixel")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def pixel_grid(self) -> GridDef:
        """Grid over (rg, az) pixel coordinates with centres at integers."""
        return GridDef(-0.5, -0.5, 1.0, 1.0, self.width, self.height)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["view"] = asdict(self.view)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SarFrame:
        d = dict(d)
        d["view"] = ViewGeometry(**d["view"])
        return cls(**d)


def slant_coordinates(xyz, view: ViewGeometry, center=(0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """Metric (slant range, azimuth) before frame offsets and scaling."""
    xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
    rel = xyz[:, :2] - np.asarray(center, dtype=float)
    g = rel @ view.ground_range_direction()
    a = rel @ view.flight_direction()
    th = view.theta
    return g * math.sin(th) - xyz[:, 2] * math.cos(th), a


def project_points(xyz, frame: SarFrame) -> tuple[np.ndarray, np.ndarray]:
    """Continuous pixel coordinates ``(rg_px, az_px)`` of 3D points."""
    s, a = slant_coordinates(xyz, frame.view, (frame.center_x, frame.center_y))
    return (s - frame.origin_rg) / frame.spacing_rg, (a - frame.origin_az) / frame.spacing_az


def project_point(x: float, y: float, h: float, frame: SarFrame) -> tuple[float, float]:
    rg, az = project_points([[x, y, h]], frame)
    return float(rg[0]), float(az[0])


def frame_for_scene(
    xyz,
    view: ViewGeometry,
    spacing_az: float = SPACING_AZ,
    spacing_rg: float = SPACING_RG,
    margin: int = 5,
    center=None,
) -> SarFrame:
    """Frame covering every projected point plus ``margin`` pixels on each side."""
    xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
    if center is None:
        lo, hi = xyz[:, :2].min(axis=0), xyz[:, :2].max(axis=0)
        center = (lo + hi) / 2
    s, a = slant_coordinates(xyz, view, center)
    origin_rg = s.min() - margin * spacing_rg
    origin_az = a.min() - margin * spacing_az
    width = int(math.ceil((s.max() - origin_rg) / spacing_rg)) + margin + 1
    height = int(math.ceil((a.max() - origin_az) / spacing_az)) + margin + 1
    return SarFrame(
        spacing_az, spacing_rg, view, float(origin_az), float(origin_rg), width, height,
        float(center[0]), float(center[1]),
    )


@dataclass
class MaskStack:
    """Per-building binary rasters sharing one frame."""

    frame: SarFrame
    masks: dict[str, np.ndarray] = field(default_factory=dict)
    flags: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for k, m in self.masks.items():
            self._check(k, m)

    def _check(self, key, m):
        if m.shape != self.frame.shape:
            raise ValueError(f"mask {key!r} has shape {m.shape}, frame is {self.frame.shape}")

    def __setitem__(self, key: str, m: np.ndarray) -> None:
        m = np.asarray(m).astype(bool)
        self._check(key, m)
        self.masks[key] = m

    def __getitem__(self, key: str) -> np.ndarray:
        return self.masks[key]

    def __contains__(self, key) -> bool:
        return key in self.masks

    def __len__(self) -> int:
        return len(self.masks)

    def ids(self) -> list[str]:
        return list(self.masks)

    def flag(self, key: str, reason: str) -> None:
        logger.info("building %s flagged: %s", key, reason)
        self.flags[key] = reason

    def subset(self, ids) -> MaskStack:
        ids = list(ids)
        return MaskStack(
            self.frame,
            {k: self.masks[k] for k in ids},
            {k: v for k, v in self.flags.items() if k in ids},
        )


def splat(rg, az, shape) -> np.ndarray:
    """Binary raster with the nearest pixel of each coordinate set."""
    mask = np.zeros(shape, dtype=bool)
    r = np.rint(az).astype(np.int64)
    c = np.rint(rg).astype(np.int64)
    ok = (r >= 0) & (r < shape[0]) & (c >= 0) & (c < shape[1])
    mask[r[ok], c[ok]] = True
    return mask


def make_gt_masks(selections: dict[str, PointCloud], frame: SarFrame) -> MaskStack:
    stack = MaskStack(frame)
    for fid, pts in selections.items():
        rg, az = project_points(pts.xyz, frame)
        m = splat(rg, az, frame.shape)
        if not m.any():
            stack[fid] = m
            stack.flag(fid, "projects entirely off-frame")
            continue
        stack[fid] = ndimage.binary_closing(m, structure=_SQUARE)
    return stack


# --------------------------------------------------------------------------
# footprint representations


@dataclass(frozen=True)
class EdgeVisibility:
    visible: bool
    delta_deg: float
    shared: bool = False


def _shared_edges(fp: Footprint, others: FootprintSet, tol: float = 1e-6) -> np.ndarray:
    edges = fp.edges()  # (n, 2, 2)
    shared = np.zeros(len(edges), dtype=bool)
    for other in others:
        if other.id == fp.id:
            continue
        oe = other.edges()
        # match edge endpoints in either direction
        same = np.all(np.abs(edges[:, None, :, :] - oe[None, :, :, :]) <= tol, axis=(2, 3))
        flip = np.all(np.abs(edges[:, None, :, :] - oe[None, :, ::-1, :]) <= tol, axis=(2, 3))
        shared |= np.any(same | flip, axis=1)
    return shared


def footprint_visibility(fp: Footprint, all_footprints: FootprintSet, frame: SarFrame) -> list[EdgeVisibility]:
    """Sensor visibility of each edge ``ring[k] -> ring[k+1]``.

    An edge is visible when the angle between its outward normal and the
    ground-range direction lies in (90, 180] degrees and no other footprint
    has the same edge.
    """
    r = frame.view.ground_range_direction()
    edges = fp.edges()
    vec = edges[:, 1] - edges[:, 0]
    normals = np.column_stack([vec[:, 1], -vec[:, 0]])  # outward for CCW rings
    lengths = np.linalg.norm(normals, axis=1)
    cosd = (normals @ r) / np.where(lengths > 0, lengths, 1.0)
    delta = np.degrees(np.arccos(np.clip(cosd, -1.0, 1.0)))
    shared = _shared_edges(fp, all_footprints)
    facing = (cosd < -1e-9) & (lengths > 0)
    return [EdgeVisibility(bool(f and not s), float(d), bool(s)) for f, d, s in zip(facing, delta, shared)]


def _draw_segment(mask: np.ndarray, p0, p1) -> None:
    n = int(math.ceil(4 * max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1])))) + 1
    t = np.linspace(0.0, 1.0, n)
    rg = p0[0] + t * (p1[0] - p0[0])
    az = p0[1] + t * (p1[1] - p0[1])
    mask |= splat(rg, az, mask.shape)


def make_footprint_masks(
    footprints: FootprintSet,
    frame: SarFrame,
    representation: str = "cbf",
    ground_height: float = 0.0,
) -> MaskStack:
    """Project footprints at ground height into the frame.

    ``cbf`` fills the projected polygon; ``svs`` draws only sensor-visible
    edges as 1-pixel lines and dilates them once with a 3x3 square.
    """
    representation = representation.lower()
    if representation not in ("cbf", "svs"):
        raise ValueError(f"unknown footprint representation {representation!r}")
    stack = MaskStack(frame)
    grid = frame.pixel_grid
    for fp in footprints:
        ring3 = np.column_stack([fp.ring, np.full(len(fp.ring), ground_height)])
        rg, az = project_points(ring3, frame)
        poly = np.column_stack([rg, az])
        area = 0.5 * abs(np.dot(rg, np.roll(az, -1)) - np.dot(az, np.roll(rg, -1)))
        if area < 1e-9:
            stack[fp.id] = np.zeros(frame.shape, dtype=bool)
            stack.flag(fp.id, "degenerate projected footprint")
            continue
        if representation == "cbf":
            m = rasterize_polygon(poly, grid)
        else:
            m = np.zeros(frame.shape, dtype=bool)
            vis = footprint_visibility(fp, footprints, frame)
            n = len(poly)
            for k, ev in enumerate(vis):
                if ev.visible:
                    _draw_segment(m, poly[k], poly[(k + 1) % n])
            if m.any():
                m = ndimage.binary_dilation(m, structure=_SQUARE)
        stack[fp.id] = m
        if not m.any():
            stack.flag(fp.id, f"empty {representation} mask")
    return stack


# --------------------------------------------------------------------------
# intensity


@dataclass
class IntensityImage:
    frame: SarFrame
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.frame.shape:
            raise ValueError("intensity shape does not match frame")


def scatterer_counts(xyz, frame: SarFrame) -> np.ndarray:
    rg, az = project_points(xyz, frame)
    r = np.rint(az).astype(np.int64)
    c = np.rint(rg).astype(np.int64)
    ok = (r >= 0) & (r < frame.height) & (c >= 0) & (c < frame.width)
    counts = np.zeros(frame.shape, dtype=np.float64)
    np.add.at(counts, (r[ok], c[ok]), 1.0)
    return counts


def speckle(shape, seed: int) -> np.ndarray:
    """Unit-mean exponential speckle, one independent stream per row."""
    streams = np.random.SeedSequence(seed).spawn(shape[0])
    out = np.empty(shape, dtype=np.float64)
    for i, ss in enumerate(streams):
        out[i] = np.random.default_rng(ss).exponential(1.0, shape[1])
    return out


def simulate_intensity(
    p_svs: PointCloud, frame: SarFrame, seed: int, floor: float = SPECKLE_FLOOR
) -> IntensityImage:
    """Scatterer count per pixel times speckle, scaled by its 99th percentile and clipped to [0, 1]."""
    counts = scatterer_counts(p_svs.xyz, frame)
    raw = (counts + floor) * speckle(frame.shape, seed)
    scale = np.percentile(raw, 99)
    return IntensityImage(frame, np.clip(raw / scale, 0.0, 1.0))


def intensity_mode(values: np.ndarray, bins: int = 256) -> float:
    hist, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    k = int(np.argmax(hist))
    return float(0.5 * (edges[k] + edges[k + 1]))


def postprocess_filter(gt_masks: MaskStack, intensity: IntensityImage, looks: int = 5) -> MaskStack:
    """Drop buildings whose mean intensity inside their mask is below the image mode.

    The intensity is box-averaged over ``looks x looks`` pixels first so the
    mode describes the background level rather than the speckle peak at zero.
    """
    if gt_masks.frame.shape != intensity.frame.shape:
        raise ValueError("masks and intensity do not share a frame")
    img = intensity.values
    if looks > 1:
        img = ndimage.uniform_filter(img, size=looks, mode="nearest")
    mode = intensity_mode(img)
    keep = []
    out_flags = {}
    for fid, m in gt_masks.masks.items():
        if not m.any():
            out_flags[fid] = "empty mask dropped"
            continue
        if img[m].mean() < mode:
            out_flags[fid] = "mean intensity below mode, dropped"
            continue
        keep.append(fid)
    out = gt_masks.subset(keep)
    for fid, reason in out_flags.items():
        logger.info("building %s: %s", fid, reason)
    out.flags.update(out_flags)
    return out


# --------------------------------------------------------------------------
# PGM files


def write_pgm(path, values: np.ndarray, maxval: int = 255) -> None:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("PGM rasters are 2-D")
    if not 0 < maxval < 65536:
        raise ValueError("maxval must be in 1..65535")
    if values.size and (values.min() < 0 or values.max() > maxval):
        raise ValueError("values out of range for maxval")
    dtype = ">u1" if maxval < 256 else ">u2"
    header = f"P5\n{values.shape[1]} {values.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + values.astype(dtype).tobytes())


def read_pgm(path) -> tuple[np.ndarray, int]:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace before the raster
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = ">u1" if maxval < 256 else ">u2"
    n = w * h * np.dtype(dtype).itemsize
    if len(data) - pos < n:
        raise ValueError(f"{path}: truncated raster")
    arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return arr.astype(np.uint16 if maxval > 255 else np.uint8), maxval


def save_mask(path, mask: np.ndarray) -> None:
    write_pgm(path, np.where(mask, 255, 0).astype(np.uint8), 255)


def load_mask(path) -> np.ndarray:
    arr, _ = read_pgm(path)
    return arr > 0


def save_intensity(path, image: IntensityImage) -> None:
    path = Path(path)
    write_pgm(path, np.rint(image.values * 65535).astype(np.uint16), 65535)
    path.with_suffix(".json").write_text(json.dumps(image.frame.to_dict(), indent=2))


def load_intensity(path) -> IntensityImage:
    path = Path(path)
    arr, maxval = read_pgm(path)
    frame = SarFrame.from_dict(json.loads(path.with_suffix(".json").read_text()))
    return IntensityImage(frame, arr.astype(np.float64) / maxval)


STACK_INDEX = "index.json"


def save_stack(stack: MaskStack, directory) -> None:
    """One PGM per building, cropped to its bounding box.

    ``index.json`` in the same directory records the frame shape, each
    crop's (row, col) origin in the frame and any flags, so full-frame
    masks can be restored exactly without storing mostly-empty rasters.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    origins = {}
    for fid, m in stack.masks.items():
        if m.any():
            rows = np.nonzero(m.any(axis=1))[0]
            cols = np.nonzero(m.any(axis=0))[0]
            r0, c0 = int(rows[0]), int(cols[0])
            crop = m[r0 : rows[-1] + 1, c0 : cols[-1] + 1]
        else:
            r0, c0, crop = 0, 0, np.zeros((1, 1), dtype=bool)
        save_mask(directory / f"{fid}.pgm", crop)
        origins[fid] = [r0, c0]
    index = {"shape": list(stack.frame.shape), "origins": origins, "flags": stack.flags}
    (directory / STACK_INDEX).write_text(json.dumps(index, indent=1, sort_keys=True))


def load_stack(directory, frame: SarFrame, ids=None) -> MaskStack:
    directory = Path(directory)
    index = json.loads((directory / STACK_INDEX).read_text())
    if tuple(index["shape"]) != frame.shape:
        raise ValueError(f"{directory}: masks were saved for frame {index['shape']}, not {list(frame.shape)}")
    origins = index["origins"]
    if ids is None:
        ids = sorted(origins)
    stack = MaskStack(frame)
    for fid in ids:
        if fid not in origins:
            raise ValueError(f"{directory}: no mask for building {fid}")
        crop = load_mask(directory / f"{fid}.pgm")
        r0, c0 = origins[fid]
        m = np.zeros(frame.shape, dtype=bool)
        m[r0 : r0 + crop.shape[0], c0 : c0 + crop.shape[1]] = crop
        stack[fid] = m
    stack.flags.update({k: v for k, v in index["flags"].items() if k in stack})
    return stack

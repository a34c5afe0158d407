"""Footprint positioning errors (CBF-E): random image-plane shifts of footprint masks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .sargeo import MaskStack


@dataclass(frozen=True)
class OffsetModel:
    mu: float = 4.13
    sigma: float = 1.71
    seed: int = 0

    def __post_init__(self):
        if not (self.mu > 0 and self.sigma > 0):
            raise ValueError("mu and sigma must be positive")


@dataclass(frozen=True)
class Offset:
    magnitude: float  # metres
    alpha: int  # degrees from the slant-range axis towards azimuth

    def pixels(self, spacing_rg: float, spacing_az: float) -> tuple[int, int]:
        """(range, azimuth) shift in whole pixels."""
        a = math.radians(self.alpha)
        return (
            int(np.rint(self.magnitude * math.cos(a) / spacing_rg)),
            int(np.rint(self.magnitude * math.sin(a) / spacing_az)),
        )


def sample_offset(model: OffsetModel, rng: np.random.Generator) -> Offset:
    """Magnitude ~ N(mu, sigma^2) redrawn while negative; angle uniform on 0..359."""
    mag = rng.normal(model.mu, model.sigma)
    while mag < 0:
        mag = rng.normal(model.mu, model.sigma)
    return Offset(float(mag), int(rng.integers(0, 360)))


def sample_offsets(model: OffsetModel, n: int) -> list[Offset]:
    rng = np.random.default_rng(model.seed)
    return [sample_offset(model, rng) for _ in range(n)]


def shift_mask(mask: np.ndarray, d_rg: int, d_az: int) -> np.ndarray:
    """Translate by whole pixels; content moved past the border is lost."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    src_r = slice(max(0, -d_az), min(h, h - d_az))
    dst_r = slice(max(0, d_az), min(h, h + d_az))
    src_c = slice(max(0, -d_rg), min(w, w - d_rg))
    dst_c = slice(max(0, d_rg), min(w, w + d_rg))
    if src_r.start < src_r.stop and src_c.start < src_c.stop:
        out[dst_r, dst_c] = mask[src_r, src_c]
    return out


def apply_offsets(stack: MaskStack, model: OffsetModel, offsets: list[Offset] | None = None) -> tuple[MaskStack, dict[str, Offset]]:
    """Shift every mask by an independent offset drawn in id order."""
    ids = stack.ids()
    if offsets is None:
        offsets = sample_offsets(model, len(ids))
    if len(offsets) != len(ids):
        raise ValueError("one offset per mask is required")
    out = MaskStack(stack.frame)
    used = {}
    for fid, off in zip(ids, offsets):
        d_rg, d_az = off.pixels(stack.frame.spacing_rg, stack.frame.spacing_az)
        m = shift_mask(stack[fid], d_rg, d_az)
        out[fid] = m
        used[fid] = off
        if stack[fid].any() and not m.any():
            out.flag(fid, "shifted fully off-frame")
    return out, used


def write_offsets_csv(path, offsets: dict[str, Offset]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "magnitude", "alpha"])
        for fid, off in offsets.items():
            w.writerow([fid, repr(off.magnitude), off.alpha])

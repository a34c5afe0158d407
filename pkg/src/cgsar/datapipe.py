"""Per-building samples, region split, training loop and full-frame prediction."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .cgnet import Model
from .nn.checkpoint import save_checkpoint
from .nn.layers import bce_with_logits
from .nn.optim import Nadam
from .sargeo import IntensityImage, MaskStack, SarFrame

logger = logging.getLogger(__name__)


@dataclass
class Sample:
    building_id: str
    origin: tuple[int, int]  # (az row, rg col) of the patch corner
    sar: np.ndarray
    gt: np.ndarray
    gis: dict[str, np.ndarray]  # footprint representation -> patch

    @property
    def size(self) -> int:
        return self.sar.shape[0]

    def window(self) -> tuple[slice, slice]:
        r, c = self.origin
        return slice(r, r + self.size), slice(c, c + self.size)


@dataclass
class TrainConfig:
    lr0: float = 2e-3
    lr_factor: float = math.sqrt(10.0)
    plateau_epochs: int = 2
    batch: int = 5
    max_epochs: int = 20
    seed: int = 0
    patch: int = 256
    stride: int = 150
    precision: str = "float32"

    def validate(self) -> None:
        if not (self.lr0 > 0 and self.lr_factor > 0):
            raise ValueError("learning rate and factor must be positive")
        if min(self.plateau_epochs, self.batch, self.max_epochs, self.patch, self.stride) < 1:
            raise ValueError("epochs, batch, patch and stride must be positive")
        if self.stride > self.patch:
            raise ValueError("stride must not exceed patch size")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")


def patch_origins(n: int, patch: int, stride: int) -> np.ndarray:
    if n < patch:
        return np.zeros(0, dtype=int)
    return np.arange(0, n - patch + 1, stride)


def _bbox(mask: np.ndarray):
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    return rows[0], rows[-1], cols[0], cols[-1]


def extract_patches(
    intensity: IntensityImage,
    gt_masks: MaskStack,
    gis_masks: MaskStack,
    patch: int,
    stride: int,
    carry: dict[str, MaskStack] | None = None,
) -> list[Sample]:
    """One sample per building from the sliding patch grid.

    A patch qualifies for a building when both its GT and GIS masks lie
    entirely inside it.  Among qualifying patches the one with the largest
    margin between the building's bounding box and the patch border wins;
    ties go to the smallest row-major patch index.  ``carry`` adds further
    footprint representations cut from the same window.
    """
    carry = carry or {}
    h, w = intensity.values.shape
    rows = patch_origins(h, patch, stride)
    cols = patch_origins(w, patch, stride)
    samples = []
    for fid in gt_masks.ids():
        if fid not in gis_masks:
            continue
        both = gt_masks[fid] | gis_masks[fid]
        if not gt_masks[fid].any() or not gis_masks[fid].any():
            logger.info("building %s dropped: empty mask", fid)
            continue
        r0, r1, c0, c1 = _bbox(both)
        mr = np.minimum(r0 - rows, rows + patch - 1 - r1)
        mc = np.minimum(c0 - cols, cols + patch - 1 - c1)
        margin = np.minimum(mr[:, None], mc[None, :])
        if len(rows) == 0 or len(cols) == 0 or margin.max() < 0:
            logger.info("building %s dropped: no patch holds its masks", fid)
            continue
        k = int(np.argmax(margin))  # first maximum = smallest row-major index
        pr, pc = rows[k // len(cols)], cols[k % len(cols)]
        win = (slice(pr, pr + patch), slice(pc, pc + patch))
        gis = {"main": gis_masks[fid][win].astype(np.float32)}
        for kind, stack in carry.items():
            gis[kind] = stack[fid][win].astype(np.float32)
        samples.append(Sample(fid, (int(pr), int(pc)), intensity.values[win].astype(np.float32), gt_masks[fid][win].astype(np.float32), gis))
    return samples


def split_regions(samples: list[Sample], frame: SarFrame, train_fraction: float) -> tuple[list[Sample], list[Sample]]:
    """Split at one azimuth row: patches above it train, patches below it test.

    The border is placed on a patch-origin row so that whole patch bands go
    to either side; among those rows the one whose train share of the kept
    samples is closest to ``train_fraction`` wins (ties: the row nearest
    ``train_fraction * frame.height``).  Samples whose patch crosses the
    border are dropped, so no pixel is shared between the splits.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    starts = np.array([s.origin[0] for s in samples], dtype=int)
    ends = np.array([s.origin[0] + s.size for s in samples], dtype=int)
    target_row = train_fraction * frame.height
    best = None
    for border in np.unique(starts):
        n_train = int(np.count_nonzero(ends <= border))
        n_test = int(np.count_nonzero(starts >= border))
        if n_train == 0 or n_test == 0:
            continue
        key = (abs(n_train / (n_train + n_test) - train_fraction), abs(border - target_row), int(border))
        if best is None or key < best:
            best = key
    if best is None:
        raise ValueError(
            f"no border row leaves samples on both sides ({len(samples)} samples); "
            "try a different train fraction or a smaller stride"
        )
    border = best[2]
    train = [s for s, e in zip(samples, ends) if e <= border]
    test = [s for s, b in zip(samples, starts) if b >= border]
    logger.info("split at row %d: %d train, %d test, %d dropped", border, len(train), len(test), len(samples) - len(train) - len(test))
    return train, test


class PlateauSchedule:
    """Divide the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr0: float, factor: float = math.sqrt(10.0), patience: int = 2):
        self.lr0, self.factor, self.patience = lr0, factor, patience
        self.best = math.inf
        self.stale = 0
        self.drops = 0

    @property
    def lr(self) -> float:
        if self.factor == math.sqrt(10.0):
            return self.lr0 * 10.0 ** (-self.drops / 2)
        return self.lr0 / self.factor**self.drops

    def update(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.drops += 1
                self.stale = 0
        return self.lr


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainLog:
    rows: list[tuple[int, float, float]] = field(default_factory=list)  # epoch, loss, lr
    seconds: float = 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "lr"])
            for e, loss, lr in self.rows:
                w.writerow([e, repr(loss), repr(lr)])


def stack_batch(samples: list[Sample], gis_kind: str, dtype=np.float32):
    sar = np.stack([s.sar for s in samples]).astype(dtype)[..., None]
    gis = np.stack([s.gis[gis_kind] for s in samples]).astype(dtype)[..., None]
    gt = np.stack([s.gt for s in samples]).astype(dtype)[..., None]
    return sar, gis, gt


def train(
    model: Model,
    samples: list[Sample],
    cfg: TrainConfig,
    gis_kind: str = "main",
    checkpoint_path=None,
    loss_hook=None,
) -> TrainLog:
    """Nadam on clamped BCE with a plateau learning-rate schedule.

    ``loss_hook(epoch, loss) -> loss`` may replace the measured epoch loss
    (used to exercise the schedule).
    """
    cfg.validate()
    if not samples:
        raise ValueError("no training samples")
    if cfg.batch > len(samples):
        raise ValueError(f"batch {cfg.batch} exceeds the {len(samples)} available samples")
    rng = np.random.default_rng(cfg.seed)
    params = model.params()
    opt = Nadam(params)
    sched = PlateauSchedule(cfg.lr0, cfg.lr_factor, cfg.plateau_epochs)
    log = TrainLog()
    good = [p.value.copy() for p in params]
    t0 = time.perf_counter()
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        lr = sched.lr
        order = rng.permutation(len(samples))
        losses = []
        for k in range(0, len(order), cfg.batch):
            batch = [samples[i] for i in order[k : k + cfg.batch]]
            sar, gis, gt = stack_batch(batch, gis_kind, model.dtype)
            model.zero_grad()
            z = model.forward(sar, gis)
            loss, gz = bce_with_logits(z, gt)
            if not math.isfinite(loss):
                _restore(params, good)
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, _ckpt_config(model), params, model.seed, step)
                raise TrainingAborted(f"non-finite loss at epoch {epoch}; last good state kept")
            model.backward(gz, input_grads=False)
            opt.step(lr)
            step += 1
            losses.append(loss * len(batch))
        mean_loss = float(np.sum(losses) / len(samples))
        if loss_hook is not None:
            mean_loss = loss_hook(epoch, mean_loss)
        log.rows.append((epoch, mean_loss, lr))
        logger.info("epoch %d loss %.5f lr %.3g", epoch, mean_loss, lr)
        for p, g in zip(params, good):
            if not np.all(np.isfinite(p.value)):
                _restore(params, good)
                raise TrainingAborted(f"non-finite parameter {p.name} at epoch {epoch}")
            g[...] = p.value
        sched.update(mean_loss)
    log.seconds = time.perf_counter() - t0
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, _ckpt_config(model), params, model.seed, step)
    return log


def _restore(params, good) -> None:
    for p, g in zip(params, good):
        p.value[...] = g


def _ckpt_config(model: Model) -> dict:
    return {"kind": model.kind, "net": model.config.to_dict(), "dtype": model.dtype.name}


def predict_probabilities(model: Model, samples: list[Sample], gis_kind: str = "main", batch: int = 5) -> list[np.ndarray]:
    out = []
    for k in range(0, len(samples), batch):
        chunk = samples[k : k + batch]
        sar, gis, _ = stack_batch(chunk, gis_kind, model.dtype)
        out += list(model.predict_proba(sar, gis))
    return out


def predict_all(model: Model, samples: list[Sample], frame: SarFrame, gis_kind: str = "main", threshold: float = 0.5) -> MaskStack:
    """Binary prediction of every sample placed back into a full-frame mask."""
    stack = MaskStack(frame)
    for s, p in zip(samples, predict_probabilities(model, samples, gis_kind)):
        m = np.zeros(frame.shape, dtype=bool)
        m[s.window()] = p > threshold
        stack[s.building_id] = m
    return stack


def overlay_masks(stack: MaskStack) -> np.ndarray:
    count = np.zeros(stack.frame.shape, dtype=np.int32)
    for m in stack.masks.values():
        count += m
    return count

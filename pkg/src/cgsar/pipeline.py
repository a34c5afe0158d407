"""End-to-end runs: scene -> dataset -> training -> evaluation -> LoD1.

Each stage reads and writes plain files so the command line can run them
one at a time; :func:`repro` chains all of them under one seed.
"""

from __future__ import annotations

import csv
import json
import logging
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cgnet import Model, NetConfig
from .cloud import dem_to_cloud, fill_vertical, hpr_mask_tiled, select_building_points
from .config import RunConfig
from .datapipe import Sample, extract_patches, predict_all, split_regions, train
from .giserr import Offset, apply_offsets, write_offsets_csv
from .lod1 import (
    HeightEstimate,
    extrude_lod1,
    height_error_stats,
    height_from_layover,
    measure_layover,
    write_heights_csv,
    write_histogram_csv,
    write_obj,
)
from .metrics import Report, evaluate
from .nn.checkpoint import load_into, read_checkpoint, save_checkpoint
from .sargeo import (
    IntensityImage,
    MaskStack,
    SarFrame,
    frame_for_scene,
    load_intensity,
    load_stack,
    make_footprint_masks,
    make_gt_masks,
    postprocess_filter,
    save_intensity,
    save_stack,
    simulate_intensity,
)
from .scene import DemGrid, Footprint, generate_scene, load_footprints, save_dem, save_footprints

logger = logging.getLogger(__name__)

GIS_KINDS = ("cbf", "svs", "cbfe")
MODEL_KINDS = ("cgnet", "baseline")


def derive_seed(seed: int, tag: str) -> int:
    """Independent, reproducible sub-seed for one pipeline stage."""
    return int(np.random.SeedSequence([seed, zlib.crc32(tag.encode())]).generate_state(1)[0])


# --------------------------------------------------------------------------
# scene


def make_scene(cfg: RunConfig, out=None) -> tuple[DemGrid, list[Footprint]]:
    dem, fps = generate_scene(cfg.scene_spec())
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        save_dem(dem, out / "dem.asc")
        save_footprints(fps, out / "footprints.json")
        cfg.write(out / "config.txt")
    return dem, fps


# --------------------------------------------------------------------------
# dataset


@dataclass
class Dataset:
    frame: SarFrame
    intensity: IntensityImage
    footprints: list[Footprint]
    masks: dict[str, MaskStack]  # "gt", "cbf", "svs", "cbfe"
    offsets: dict[str, Offset] = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    @property
    def ids(self) -> list[str]:
        return self.masks["gt"].ids()

    def footprint(self, fid: str) -> Footprint:
        return next(fp for fp in self.footprints if fp.id == fid)


def build_dataset(cfg: RunConfig, dem: DemGrid, footprints: list[Footprint], out=None) -> Dataset:
    """Simulate the SAR scene and derive GT, footprint and CBF-E masks."""
    t0 = time.perf_counter()
    view = cfg.view()
    p_dem = dem_to_cloud(dem, footprints)
    p_com = fill_vertical(p_dem, cfg.fill_params())
    visible = hpr_mask_tiled(p_com.xyz, view, tile=cfg.hpr_tile, far_multiple=cfg.hpr_far, radius_exponent=cfg.hpr_exponent)
    p_svs = p_com.subset(visible)
    frame = frame_for_scene(p_com.xyz, view, cfg.spacing_az, cfg.spacing_rg)
    selected, excluded = {}, {}
    for fp in footprints:
        pts = select_building_points(p_svs, fp, cfg.jump_threshold, cfg.ground_buffer)
        if pts is None:
            excluded[fp.id] = "no visible points above the ground buffer"
        else:
            selected[fp.id] = pts
    gt = make_gt_masks(selected, frame)
    intensity = simulate_intensity(p_svs, frame, derive_seed(cfg.seed, "speckle"))
    gt = postprocess_filter(gt, intensity)
    ids = [fid for fid in gt.ids() if gt[fid].any()]
    gt = gt.subset(ids)
    kept = [fp for fp in footprints if fp.id in set(ids)]
    cbf = make_footprint_masks(footprints, frame, "cbf").subset(ids)
    svs = make_footprint_masks(footprints, frame, "svs").subset(ids)
    cbfe, offsets = apply_offsets(cbf, cfg.offset_model())
    info = {
        "points": {"dem": len(p_dem), "completed": len(p_com), "visible": len(p_svs)},
        "buildings": {"scene": len(footprints), "kept": len(ids), "excluded": excluded, "filtered": dict(gt.flags)},
        "seconds": round(time.perf_counter() - t0, 1),
    }
    ds = Dataset(frame, intensity, kept, {"gt": gt, "cbf": cbf, "svs": svs, "cbfe": cbfe}, offsets, info)
    if out is not None:
        save_dataset(ds, cfg, out)
    return ds


def save_dataset(ds: Dataset, cfg: RunConfig, out) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_intensity(out / "intensity.pgm", ds.intensity)
    for kind, stack in ds.masks.items():
        save_stack(stack, out / kind)
    save_footprints(ds.footprints, out / "footprints.json")
    write_offsets_csv(out / "offsets.csv", ds.offsets)
    manifest = {
        "ids": ds.ids,
        "frame": ds.frame.to_dict(),
        "seed": cfg.seed,
        "kinds": sorted(ds.masks),
        "info": {k: v for k, v in ds.info.items() if k != "seconds"},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    cfg.write(out / "config.txt")


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise FileNotFoundError(f"{path} is not a dataset directory (no manifest.json)")
    manifest = json.loads((path / "manifest.json").read_text())
    intensity = load_intensity(path / "intensity.pgm")
    frame = intensity.frame
    ids = manifest["ids"]
    masks = {kind: load_stack(path / kind, frame, ids) for kind in manifest["kinds"]}
    fps = load_footprints(path / "footprints.json")
    offsets = {}
    if (path / "offsets.csv").is_file():
        with open(path / "offsets.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                offsets[row["id"]] = Offset(float(row["magnitude"]), int(row["alpha"]))
    return Dataset(frame, intensity, fps, masks, offsets, manifest.get("info", {}))


def make_samples(ds: Dataset, cfg: RunConfig) -> tuple[list[Sample], list[Sample]]:
    """One sample per building (qualified by its CBF mask), split into regions."""
    carry = {kind: ds.masks[kind] for kind in GIS_KINDS if kind in ds.masks}
    samples = extract_patches(ds.intensity, ds.masks["gt"], ds.masks["cbf"], cfg.patch, cfg.stride, carry)
    return split_regions(samples, ds.frame, cfg.train_fraction)


def overlap_fraction(stack: MaskStack) -> float:
    """Fraction of buildings whose mask overlaps at least one other building's mask."""
    count = np.zeros(stack.frame.shape, dtype=np.int32)
    for m in stack.masks.values():
        count += m
    shared = count >= 2
    ids = stack.ids()
    return sum(bool(np.any(stack[k] & shared)) for k in ids) / max(len(ids), 1)


# --------------------------------------------------------------------------
# models


def new_model(cfg: RunConfig, kind: str, seed: int) -> Model:
    dtype = np.float64 if cfg.precision == "float64" else np.float32
    return Model(cfg.net_config(kind), kind, seed, dtype, (cfg.patch, cfg.patch))


def model_header(model: Model) -> dict:
    return {"kind": model.kind, "net": model.config.to_dict(), "dtype": model.dtype.name}


def save_model(path, model: Model, step: int = 0, extra: dict | None = None) -> None:
    save_checkpoint(path, model_header(model), model.params(), model.seed, step, extra)


def load_model(path, patch: int | None = None) -> Model:
    header, arrays = read_checkpoint(path)
    conf = header["config"]
    net = NetConfig.from_dict(conf["net"])
    hw = (patch, patch) if patch else (256, 256)
    model = Model(net, conf["kind"], header["seed"], np.dtype(conf.get("dtype", "float32")), hw)
    load_into(model.params(), arrays)
    return model


@dataclass
class RunResult:
    name: str
    kind: str
    gis_train: str
    gis_test: str
    seed: int
    report: Report
    losses: list[float]
    seconds: float

    def summary(self) -> dict:
        return {
            "model": self.kind,
            "gis_train": self.gis_train,
            "gis_test": self.gis_test,
            "seed": self.seed,
            "macro": self.report.macro,
            "micro": self.report.micro,
            "losses": self.losses,
        }


def train_and_evaluate(
    cfg: RunConfig,
    train_samples: list[Sample],
    test_samples: list[Sample],
    ds: Dataset,
    kind: str,
    gis_train: str,
    gis_test: str | None = None,
    seed: int = 0,
    out=None,
) -> tuple[Model, RunResult]:
    gis_test = gis_test or gis_train
    name = f"{kind}_{gis_train}" + (f"_on_{gis_test}" if gis_test != gis_train else "") + f"_s{seed}"
    model = new_model(cfg, kind, derive_seed(seed, f"init-{kind}"))
    t0 = time.perf_counter()
    run_dir = Path(out) / name if out is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    log = train(
        model,
        train_samples,
        cfg.train_config(derive_seed(seed, "shuffle")),
        gis_kind=gis_train,
        checkpoint_path=run_dir / "model.cgn" if run_dir is not None else None,
    )
    pred = predict_all(model, test_samples, ds.frame, gis_test, cfg.threshold)
    report = evaluate_samples(pred, ds, test_samples)
    seconds = time.perf_counter() - t0
    if run_dir is not None:
        log.write_csv(run_dir / "train_log.csv")
        report.write(run_dir / "metrics.csv", run_dir / "metrics.json")
    result = RunResult(name, kind, gis_train, gis_test, seed, report, [r[1] for r in log.rows], seconds)
    logger.info("%s: macro F1 %.4f (%.0f s)", name, report.macro["F1"], seconds)
    return model, result


def evaluate_samples(pred: MaskStack, ds: Dataset, samples: list[Sample]) -> Report:
    ids = [s.building_id for s in samples]
    return evaluate(pred, ds.masks["gt"].subset(ids), {s.building_id: s.window() for s in samples})


# --------------------------------------------------------------------------
# experiments


EXPERIMENTS = (
    ("cgnet", "cbf", "cbf"),
    ("baseline", "cbf", "cbf"),
    ("cgnet", "svs", "svs"),
    ("cgnet", "cbfe", "cbf"),
)


def run_experiments(
    cfg: RunConfig,
    ds: Dataset,
    seeds: list[int],
    out=None,
    experiments=EXPERIMENTS,
) -> list[RunResult]:
    """Train every (model, training GIS, test GIS) combination once per seed."""
    train_samples, test_samples = make_samples(ds, cfg)
    logger.info("%d training and %d test samples", len(train_samples), len(test_samples))
    results = []
    for seed in seeds:
        for kind, gis_train, gis_test in experiments:
            _, res = train_and_evaluate(cfg, train_samples, test_samples, ds, kind, gis_train, gis_test, seed, out)
            results.append(res)
    return results


def median_f1(results: list[RunResult], kind: str, gis_train: str, gis_test: str | None = None) -> float:
    gis_test = gis_test or gis_train
    vals = [r.report.macro["F1"] for r in results if (r.kind, r.gis_train, r.gis_test) == (kind, gis_train, gis_test)]
    if not vals:
        raise KeyError(f"no runs of {kind} trained on {gis_train} and tested on {gis_test}")
    return float(np.median(vals))


# --------------------------------------------------------------------------
# LoD1


def estimate_heights(pred: MaskStack, ds: Dataset, incidence_deg: float) -> list[tuple[HeightEstimate, str | None]]:
    """Height of every building in ``pred`` from its layover next to its footprint."""
    cbf = ds.masks["cbf"]
    union = np.zeros(ds.frame.shape, dtype=np.int32)
    for fid in cbf.ids():
        union += cbf[fid]
    out = []
    for fid in pred.ids():
        others = (union - cbf[fid]) > 0
        m = measure_layover(pred[fid], cbf[fid], ds.frame.spacing_rg, others)
        h = height_from_layover(m.length, incidence_deg)
        out.append((HeightEstimate(fid, m.length, h, ds.footprint(fid).gt_height), m.flag))
    return out


def run_lod1(pred: MaskStack, ds: Dataset, incidence_deg: float, out=None) -> dict:
    rows = estimate_heights(pred, ds, incidence_deg)
    estimates = [e for e, _ in rows]
    mae, hist = height_error_stats(estimates)
    flagged = {e.building_id: flag for e, flag in rows if flag}
    if out is not None:
        out = Path(out)
        (out / "meshes").mkdir(parents=True, exist_ok=True)
        write_heights_csv(out / "heights.csv", estimates)
        write_histogram_csv(out / "height_hist.csv", hist)
        for e in estimates:
            write_obj(out / "meshes" / f"{e.building_id}.obj", extrude_lod1(ds.footprint(e.building_id), e.h), e.building_id)
    return {"mean_abs_error": mae, "n": len(estimates), "flagged": len(flagged)}


# --------------------------------------------------------------------------
# full reproduction


def quick_config(seed: int) -> RunConfig:
    """Small profile that runs the whole chain in well under a minute."""
    cfg = RunConfig(seed=seed)
    cfg.extent = 110.0
    cfg.n_buildings = 16
    cfg.height_min, cfg.height_max = 4.0, 10.0
    cfg.width_min, cfg.width_max = 6.0, 10.0
    cfg.length_min, cfg.length_max = 6.0, 10.0
    cfg.hpr_tile = 30.0
    cfg.block_channels = [4, 4, 8, 8, 8]
    cfg.convs_per_block = [1, 1, 1, 1, 1]
    cfg.reduced_channels = 4
    cfg.latent_channels = 4
    cfg.patch = 64
    cfg.stride = 16
    cfg.batch = 2
    cfg.max_epochs = 1
    cfg.train_fraction = 0.5
    return cfg


def repro(cfg: RunConfig, out, seeds: list[int] | None = None) -> dict:
    """Scene, dataset, all model comparisons and LoD1; writes ``metrics.json``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.txt")
    seeds = seeds if seeds is not None else [cfg.seed]
    dem, fps = make_scene(cfg, out / "scene")
    ds = build_dataset(cfg, dem, fps, out / "dataset")
    results = run_experiments(cfg, ds, seeds, out / "runs")
    lod1_gt = run_lod1(ds.masks["gt"], ds, cfg.incidence, out / "lod1_gt")
    metrics = {
        "seed": cfg.seed,
        "seeds": seeds,
        "buildings": len(ds.ids),
        "overlap_fraction": overlap_fraction(ds.masks["gt"]),
        "runs": {r.name: r.summary() for r in results},
        "median_macro_f1": {
            f"{k}_{g}" + (f"_on_{t}" if t != g else ""): median_f1(results, k, g, t) for k, g, t in EXPERIMENTS
        },
        "lod1_from_gt": lod1_gt,
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    return metrics

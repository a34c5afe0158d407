"""Command line: ``cgsar <subcommand> [flags]``.

Every subcommand accepts ``--config FILE``, ``--seed``, ``--out``,
``--threads`` and one flag per configuration key (``--h-step 0.5``).
Values resolve in this order: built-in defaults, the ``config.txt`` of an
input scene or dataset, ``--config``, then individual flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import pipeline
from .config import ConfigFileError, RunConfig, load_config
from .datapipe import TrainingAborted
from .giserr import apply_offsets, write_offsets_csv
from .gradsuite import run_suite
from .metrics import evaluate
from .nn.checkpoint import CheckpointError
from .scene import DemParseError, SceneError, load_dem, load_footprints
from .sargeo import MaskStack, load_stack, save_stack

logger = logging.getLogger("cgsar")

GRAD_TOLERANCE = 1e-4


class CliError(Exception):
    pass


# --------------------------------------------------------------------------
# argument parsing


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--config", type=Path, help="key = value configuration file")
    g.add_argument("--seed", type=int, help="global seed for every random stage")
    g.add_argument("--out", type=Path, help="output directory (created if missing)")
    g.add_argument("--threads", type=int, default=None, help="cap on BLAS threads; 1 gives bit-reproducible runs")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    keys = common.add_argument_group("configuration keys")
    for f in fields(RunConfig):
        if f.name == "seed":
            continue
        keys.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar="V", default=None)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="cgsar", description="GIS-conditioned building segmentation in simulated SAR scenes.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text)

    add("gen-scene", "generate a synthetic DEM and building footprints")

    p = add("build-dataset", "simulate the SAR scene and write masks, intensity and patch lists")
    p.add_argument("--scene", type=Path, help="scene directory from gen-scene (generated in memory if omitted)")

    p = add("train", "train one model on a dataset and evaluate it on the held-out region")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--model", choices=pipeline.MODEL_KINDS, default="cgnet")
    p.add_argument("--gis", choices=pipeline.GIS_KINDS, default="cbf", help="footprint masks used for training")
    p.add_argument("--test-gis", choices=pipeline.GIS_KINDS, help="footprint masks used for testing (default: --gis)")

    p = add("predict", "predict building masks with a trained checkpoint")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--gis", choices=pipeline.GIS_KINDS, default="cbf")
    p.add_argument("--split", choices=("test", "train", "all"), default="test")

    p = add("eval", "score predicted masks against ground truth")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--pred", type=Path, required=True, help="directory written by predict")

    add_inject = add("inject-error", "shift every CBF mask by a random footprint positioning error")
    add_inject.add_argument("--dataset", type=Path, required=True)

    p = add("lod1", "estimate building heights from layover and export prism meshes")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--pred", type=Path, help="directory written by predict (ground-truth masks if omitted)")

    add("gradcheck", "finite-difference check of every layer and both models")

    p = add("repro", "run the whole pipeline: scene, dataset, four model comparisons, LoD1")
    p.add_argument("--seeds", type=int, nargs="+", help="training seeds (default: --seed)")
    p.add_argument("--quick", action="store_true", help="small scene and network, for smoke tests")
    return parser


def resolve_config(args, source: Path | None = None) -> RunConfig:
    cfg = RunConfig()
    if args.command == "repro" and args.quick:
        cfg = pipeline.quick_config(0)
    if source is not None and (source / "config.txt").is_file():
        cfg = load_config(source / "config.txt", cfg)
    if args.config is not None:
        cfg = load_config(args.config, cfg)
    for f in fields(RunConfig):
        value = getattr(args, "cfg_" + f.name, None)
        if value is not None:
            cfg.set(f.name, value)
    if args.seed is not None:
        cfg.seed = args.seed
    try:
        cfg.validate()
    except ValueError as err:
        raise ConfigFileError(f"invalid configuration: {err}") from None
    return cfg


def _out(args) -> Path:
    if args.out is None:
        raise CliError(f"{args.command} needs --out DIR")
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def _need_dir(path: Path, what: str) -> Path:
    if not path.is_dir():
        raise CliError(f"{what} {path} does not exist")
    return path


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_scene(args) -> int:
    cfg = resolve_config(args)
    dem, fps = pipeline.make_scene(cfg, _out(args))
    print(f"scene: {len(fps)} buildings on a {dem.ncols} x {dem.nrows} grid -> {args.out}")
    return 0


def cmd_build_dataset(args) -> int:
    scene = _need_dir(args.scene, "scene directory") if args.scene is not None else None
    cfg = resolve_config(args, scene)
    out = _out(args)
    if scene is not None:
        dem, fps = load_dem(scene / "dem.asc"), load_footprints(scene / "footprints.json")
    else:
        dem, fps = pipeline.make_scene(cfg)
    ds = pipeline.build_dataset(cfg, dem, fps, out)
    train, test = pipeline.make_samples(ds, cfg)
    _write_split(out / "split.json", train, test)
    print(
        f"dataset: {len(ds.ids)} buildings, {len(train)} train / {len(test)} test patches, "
        f"overlap fraction {pipeline.overlap_fraction(ds.masks['gt']):.2f} -> {out}"
    )
    return 0


def _write_split(path: Path, train, test) -> None:
    rows = {"train": [[s.building_id, *s.origin] for s in train], "test": [[s.building_id, *s.origin] for s in test]}
    path.write_text(json.dumps(rows, indent=1) + "\n")


def _dataset_and_samples(args):
    path = _need_dir(args.dataset, "dataset directory")
    cfg = resolve_config(args, path)
    ds = pipeline.load_dataset(path)
    train, test = pipeline.make_samples(ds, cfg)
    return cfg, ds, train, test


def cmd_train(args) -> int:
    cfg, ds, train, test = _dataset_and_samples(args)
    out = _out(args)
    cfg.write(out / "config.txt")
    test_gis = args.test_gis or args.gis
    _, res = pipeline.train_and_evaluate(cfg, train, test, ds, args.model, args.gis, test_gis, cfg.seed, out)
    print(f"{res.name}: macro F1 {res.report.macro['F1']:.4f}, IoU {res.report.macro['IoU']:.4f} -> {out / res.name}")
    return 0


def cmd_predict(args) -> int:
    cfg, ds, train, test = _dataset_and_samples(args)
    out = _out(args)
    if not args.checkpoint.is_file():
        raise CliError(f"checkpoint {args.checkpoint} does not exist")
    samples = {"test": test, "train": train, "all": train + test}[args.split]
    model = pipeline.load_model(args.checkpoint, cfg.patch)
    pred = pipeline.predict_all(model, samples, ds.frame, args.gis, cfg.threshold)
    save_stack(pred, out / "pred")
    windows = {s.building_id: list(s.origin) + [s.size] for s in samples}
    (out / "pred" / "windows.json").write_text(json.dumps(windows, indent=1, sort_keys=True) + "\n")
    cfg.write(out / "config.txt")
    print(f"predicted {len(pred)} buildings -> {out / 'pred'}")
    return 0


def _load_pred(pred_dir: Path, ds) -> tuple[MaskStack, dict]:
    pred_dir = pred_dir / "pred" if (pred_dir / "pred").is_dir() else pred_dir
    _need_dir(pred_dir, "prediction directory")
    pred = load_stack(pred_dir, ds.frame)
    windows = {}
    if (pred_dir / "windows.json").is_file():
        for fid, (r, c, n) in json.loads((pred_dir / "windows.json").read_text()).items():
            windows[fid] = (slice(r, r + n), slice(c, c + n))
    return pred, windows


def cmd_eval(args) -> int:
    path = _need_dir(args.dataset, "dataset directory")
    cfg = resolve_config(args, path)
    ds = pipeline.load_dataset(path)
    out = _out(args)
    pred, windows = _load_pred(args.pred, ds)
    unknown = sorted(set(pred.ids()) - set(ds.ids))
    if unknown:
        raise CliError(f"predictions for buildings not in the dataset: {unknown[:5]}")
    report = evaluate(pred, ds.masks["gt"].subset(pred.ids()), windows)
    report.write(out / "metrics.csv", out / "metrics.json")
    cfg.write(out / "config.txt")
    print(f"macro F1 {report.macro['F1']:.4f}, IoU {report.macro['IoU']:.4f} over {len(pred)} buildings")
    return 0


def cmd_inject_error(args) -> int:
    path = _need_dir(args.dataset, "dataset directory")
    cfg = resolve_config(args, path)
    ds = pipeline.load_dataset(path)
    out = _out(args)
    cbfe, offsets = apply_offsets(ds.masks["cbf"], cfg.offset_model())
    save_stack(cbfe, out / "cbfe")
    write_offsets_csv(out / "offsets.csv", offsets)
    cfg.write(out / "config.txt")
    print(f"shifted {len(cbfe)} footprint masks (mean offset {sum(o.magnitude for o in offsets.values()) / max(len(offsets), 1):.2f} m) -> {out}")
    return 0


def cmd_lod1(args) -> int:
    path = _need_dir(args.dataset, "dataset directory")
    cfg = resolve_config(args, path)
    ds = pipeline.load_dataset(path)
    out = _out(args)
    pred = _load_pred(args.pred, ds)[0] if args.pred is not None else ds.masks["gt"]
    summary = pipeline.run_lod1(pred, ds, cfg.incidence, out)
    cfg.write(out / "config.txt")
    print(f"LoD1: {summary['n']} buildings, mean absolute height error {summary['mean_abs_error']:.2f} m -> {out}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args)
    reports = run_suite(cfg.seed)
    failed = 0
    lines = ["check,checked,max_rel_error,passed"]
    for r in reports:
        ok = r.max_rel_error < GRAD_TOLERANCE
        failed += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {r.name:<18} {r.checked:4d} coords  max rel error {r.max_rel_error:.2e}")
        lines.append(f"{r.name},{r.checked},{r.max_rel_error!r},{int(ok)}")
    if args.out is not None:
        (_out(args) / "gradcheck.csv").write_text("\n".join(lines) + "\n")
    if failed:
        print(f"cgsar: error: {failed} gradient check(s) exceed {GRAD_TOLERANCE:g}", file=sys.stderr)
        return 1
    return 0


def cmd_repro(args) -> int:
    cfg = resolve_config(args)
    out = _out(args)
    metrics = pipeline.repro(cfg, out, args.seeds)
    for name, f1 in metrics["median_macro_f1"].items():
        print(f"{name:<22} median macro F1 {f1:.4f}")
    print(f"metrics -> {out / 'metrics.json'}")
    return 0


COMMANDS = {
    "gen-scene": cmd_gen_scene,
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "inject-error": cmd_inject_error,
    "lod1": cmd_lod1,
    "gradcheck": cmd_gradcheck,
    "repro": cmd_repro,
}

EXPECTED_ERRORS = (
    CliError,
    ConfigFileError,
    CheckpointError,
    TrainingAborted,
    SceneError,
    DemParseError,
    FileNotFoundError,
    ValueError,
    KeyError,
    OSError,
)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except EXPECTED_ERRORS as err:
        msg = str(err).strip().splitlines()[0] if str(err).strip() else type(err).__name__
        print(f"cgsar {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

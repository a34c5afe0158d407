import json

import numpy as np
import pytest

from cgsar import pipeline
from cgsar.cli import build_parser, main
from cgsar.config import ConfigFileError, RunConfig, config_keys, load_config, parse_config_text
from cgsar.sargeo import load_stack

SMALL = """
# tiny scene and network so every subcommand runs in seconds
extent = 110
n_buildings = 16
height_min = 4
height_max = 10
width_min = 6
width_max = 10
length_min = 6
length_max = 10
hpr_tile = 30
block_channels = 4, 4, 8, 8, 8
convs_per_block = 1 1 1 1 1
reduced_channels = 4
latent_channels = 4
patch = 64
stride = 16
batch = 2
max_epochs = 1
train_fraction = 0.5
"""


# ---------------------------------------------------------------------- config


def test_config_text_round_trip():
    cfg = parse_config_text(SMALL)
    assert cfg.block_channels == [4, 4, 8, 8, 8] and cfg.convs_per_block == [1] * 5
    again = parse_config_text(cfg.to_text())
    assert again == cfg


def test_config_errors_name_file_and_line(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("seed = 1\nbogus_key = 3\n")
    with pytest.raises(ConfigFileError, match=r"c.txt:2: unknown config key"):
        load_config(p)
    p.write_text("seed = one\n")
    with pytest.raises(ConfigFileError, match=r"c.txt:1"):
        load_config(p)
    with pytest.raises(ConfigFileError, match="does not exist"):
        load_config(tmp_path / "missing.txt")


def test_every_key_has_a_flag():
    parser = build_parser()
    args = parser.parse_args(["gen-scene", "--h-step", "0.5", "--lr0", "0.01", "--block-channels", "2,2,2,2,2"])
    assert args.cfg_h_step == "0.5" and args.cfg_lr0 == "0.01"
    flags = {a.dest for a in parser._subparsers._group_actions[0].choices["train"]._actions}
    assert {f"cfg_{k}" for k in config_keys() if k != "seed"} <= flags


def test_seed_reaches_every_stage():
    cfg = RunConfig(seed=9)
    assert cfg.scene_spec().seed == 9
    assert cfg.offset_model().seed == 9
    assert cfg.train_config().seed == 9
    assert pipeline.derive_seed(9, "speckle") != pipeline.derive_seed(9, "shuffle")
    assert pipeline.derive_seed(9, "speckle") == pipeline.derive_seed(9, "speckle")


# ------------------------------------------------------------------------- CLI


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.txt").write_text(SMALL)
    cfg = ["--config", str(root / "small.txt"), "--seed", "3", "--threads", "1"]
    assert main(["gen-scene", *cfg, "--out", str(root / "scene")]) == 0
    assert main(["build-dataset", "--scene", str(root / "scene"), "--out", str(root / "ds")]) == 0
    return root


def test_scene_and_dataset_outputs(workspace):
    for name in ("dem.asc", "footprints.json", "config.txt"):
        assert (workspace / "scene" / name).is_file()
    ds_dir = workspace / "ds"
    for name in ("manifest.json", "intensity.pgm", "intensity.json", "offsets.csv", "split.json", "config.txt"):
        assert (ds_dir / name).is_file()
    for kind in ("gt", "cbf", "svs", "cbfe"):
        assert (ds_dir / kind / "index.json").is_file()
    # the dataset inherits the scene's configuration, including its seed
    assert load_config(ds_dir / "config.txt").seed == 3
    assert load_config(ds_dir / "config.txt").extent == 110.0


def test_dataset_round_trip(workspace):
    ds = pipeline.load_dataset(workspace / "ds")
    manifest = json.loads((workspace / "ds" / "manifest.json").read_text())
    assert ds.ids == manifest["ids"]
    for kind in ("gt", "cbf", "svs", "cbfe"):
        assert ds.masks[kind].ids() == ds.ids
    assert set(ds.offsets) == set(ds.ids)


def test_train_cbf_and_svs_give_two_checkpoints(workspace, capsys):
    out = workspace / "runs"
    for gis in ("cbf", "svs"):
        assert main(["train", "--dataset", str(workspace / "ds"), "--gis", gis, "--out", str(out)]) == 0
    for gis in ("cbf", "svs"):
        run = out / f"cgnet_{gis}_s3"
        assert (run / "model.cgn").is_file() and (run / "metrics.json").is_file()
        assert (run / "train_log.csv").read_text().startswith("epoch,loss,lr")
    assert "macro F1" in capsys.readouterr().out


def test_predict_eval_and_lod1(workspace):
    ds = workspace / "ds"
    ckpt = workspace / "runs" / "cgnet_cbf_s3" / "model.cgn"
    if not ckpt.is_file():
        assert main(["train", "--dataset", str(ds), "--out", str(workspace / "runs")]) == 0
    assert main(["predict", "--dataset", str(ds), "--checkpoint", str(ckpt), "--out", str(workspace / "pred")]) == 0
    assert main(["eval", "--dataset", str(ds), "--pred", str(workspace / "pred"), "--out", str(workspace / "eval")]) == 0
    ev = json.loads((workspace / "eval" / "metrics.json").read_text())
    trained = json.loads((workspace / "runs" / "cgnet_cbf_s3" / "metrics.json").read_text())
    assert ev["macro"] == pytest.approx(trained["macro"])
    assert main(["lod1", "--dataset", str(ds), "--out", str(workspace / "lod1")]) == 0
    heights = (workspace / "lod1" / "heights.csv").read_text().splitlines()
    n = len(pipeline.load_dataset(ds).ids)
    assert len(heights) == n + 1
    assert len(list((workspace / "lod1" / "meshes").glob("*.obj"))) == n


def test_inject_error_is_seeded(workspace):
    ds = workspace / "ds"
    for k in (1, 2):
        assert main(["inject-error", "--dataset", str(ds), "--seed", "5", "--out", str(workspace / f"err{k}")]) == 0
    assert (workspace / "err1" / "offsets.csv").read_bytes() == (workspace / "err2" / "offsets.csv").read_bytes()
    frame = pipeline.load_dataset(ds).frame
    a, b = load_stack(workspace / "err1" / "cbfe", frame), load_stack(workspace / "err2" / "cbfe", frame)
    assert all(np.array_equal(a[k], b[k]) for k in a.ids())


def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == 0
    assert "model_cgnet" in capsys.readouterr().out


def test_gradcheck_fails_above_tolerance(monkeypatch):
    import cgsar.cli as cli

    monkeypatch.setattr(cli, "GRAD_TOLERANCE", 1e-15)
    assert cli.main(["gradcheck"]) == 1


@pytest.mark.parametrize(
    "argv,fragment",
    [
        (["train", "--dataset", "/nonexistent", "--out", "x"], "does not exist"),
        (["gen-scene", "--n-buildings", "0", "--out", "x"], "n_buildings"),
        (["gen-scene", "--incidence", "abc", "--out", "x"], "incidence"),
        (["gen-scene"], "--out"),
    ],
)
def test_errors_are_one_line_and_nonzero(argv, fragment, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) != 0
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1 and fragment in err


def test_unknown_flag_exits_nonzero(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen-scene", "--no-such-flag"])
    assert exc.value.code != 0


def test_repro_byte_identical(tmp_path):
    for k in (1, 2):
        assert main(["repro", "--quick", "--seed", "7", "--threads", "1", "--out", str(tmp_path / f"r{k}")]) == 0
    a = (tmp_path / "r1" / "metrics.json").read_bytes()
    assert a == (tmp_path / "r2" / "metrics.json").read_bytes()
    metrics = json.loads(a)
    assert set(metrics["median_macro_f1"]) == {"cgnet_cbf", "baseline_cbf", "cgnet_svs", "cgnet_cbfe_on_cbf"}

"""Run configuration: one flat record read from ``key = value`` text files.

Every field can also be set from the command line (``--h-step 0.5`` sets
``h_step``).  The effective configuration is written into each output
directory so a run can be repeated from its own outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .cgnet import NetConfig
from .cloud import VerticalFillParams, ViewGeometry
from .datapipe import TrainConfig
from .giserr import OffsetModel
from .scene import SceneSpec


class ConfigFileError(ValueError):
    pass


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.replace(",", " ").split()]


@dataclass
class RunConfig:
    seed: int = 0
    # scene
    extent: float = 420.0
    n_buildings: int = 300
    l_shape_fraction: float = 0.3
    height_min: float = 5.0
    height_max: float = 25.0
    width_min: float = 8.0
    width_max: float = 18.0
    length_min: float = 8.0
    length_max: float = 18.0
    touch_fraction: float = 0.1
    min_gap: float = 3.0
    cellsize: float = 0.5
    # geometry and visibility
    incidence: float = 36.0
    heading: float = 194.34
    look: str = "right"
    spacing_az: float = 0.871
    spacing_rg: float = 0.455
    h_step: float = 0.25
    jump_threshold: float = 2.0
    hpr_exponent: float = 4.8
    hpr_far: float = 100.0
    hpr_tile: float = 40.0
    ground_buffer: float = 5.0
    # footprint errors
    offset_mu: float = 4.13
    offset_sigma: float = 1.71
    # network
    block_channels: list[int] = field(default_factory=lambda: [8, 16, 16, 32, 32])
    convs_per_block: list[int] = field(default_factory=lambda: [2, 2, 2, 2, 2])
    tap_blocks: list[int] = field(default_factory=lambda: [3, 4, 5])
    reduced_channels: int = 8
    latent_channels: int = 8
    # training
    patch: int = 128
    stride: int = 48
    train_fraction: float = 0.65
    lr0: float = 2e-3
    lr_factor: float = math.sqrt(10.0)
    plateau_epochs: int = 2
    batch: int = 5
    max_epochs: int = 8
    precision: str = "float32"
    threshold: float = 0.5

    # ------------------------------------------------------------------ views

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(
            seed=self.seed,
            extent=(self.extent, self.extent),
            n_buildings=self.n_buildings,
            shape_mix=(1.0 - self.l_shape_fraction, self.l_shape_fraction),
            height_range=(self.height_min, self.height_max),
            touch_fraction=self.touch_fraction,
            dem_cellsize=self.cellsize,
            width_range=(self.width_min, self.width_max),
            length_range=(self.length_min, self.length_max),
            min_gap=self.min_gap,
        )

    def view(self) -> ViewGeometry:
        return ViewGeometry(self.incidence, self.heading, self.look)

    def fill_params(self) -> VerticalFillParams:
        return VerticalFillParams(self.h_step, self.jump_threshold)

    def offset_model(self) -> OffsetModel:
        return OffsetModel(self.offset_mu, self.offset_sigma, self.seed)

    def net_config(self, kind: str) -> NetConfig:
        return NetConfig(
            n_blocks=len(self.block_channels),
            block_channels=list(self.block_channels),
            convs_per_block=list(self.convs_per_block),
            tap_blocks=list(self.tap_blocks),
            reduced_channels=self.reduced_channels,
            latent_channels=self.latent_channels,
            input_channels=1 if kind == "cgnet" else 2,
        )

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            lr0=self.lr0,
            lr_factor=self.lr_factor,
            plateau_epochs=self.plateau_epochs,
            batch=self.batch,
            max_epochs=self.max_epochs,
            seed=self.seed if seed is None else seed,
            patch=self.patch,
            stride=self.stride,
            precision=self.precision,
        )

    def validate(self) -> None:
        self.scene_spec().validate()
        self.view()
        self.fill_params()
        self.offset_model()
        self.net_config("cgnet").validate()
        self.train_config().validate()
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigFileError("train_fraction must lie strictly between 0 and 1")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigFileError("threshold must lie strictly between 0 and 1")

    # --------------------------------------------------------------- text I/O

    def set(self, key: str, text: str) -> None:
        name = key.strip().replace("-", "_")
        kinds = {f.name: f for f in fields(self)}
        if name not in kinds:
            raise ConfigFileError(f"unknown config key {key!r}")
        current = getattr(self, name)
        try:
            if isinstance(current, bool):
                value = text.strip().lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                value = int(text)
            elif isinstance(current, float):
                value = float(text)
            elif isinstance(current, list):
                value = _ints(text)
            else:
                value = text.strip()
        except ValueError:
            raise ConfigFileError(f"config key {name}: cannot parse {text.strip()!r}") from None
        setattr(self, name, value)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())


def parse_config_text(text: str, base: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    cfg = base if base is not None else RunConfig()
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        try:
            cfg.set(key, value)
        except ConfigFileError as err:
            raise ConfigFileError(f"{source}:{n}: {err}") from None
    return cfg


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigFileError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(), base, str(path))


def config_keys() -> list[str]:
    return [f.name for f in fields(RunConfig)]

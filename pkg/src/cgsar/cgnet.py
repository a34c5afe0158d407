"""GIS-conditioned segmentation network and its concatenation baseline.

A VGG-pattern backbone encodes the SAR patch.  Features from the last three
blocks are reduced with 1x1 convolutions, upsampled to patch size and, in
CG-Net, modulated per pixel and channel by scale and shift maps predicted
from the footprint mask:

    e      = relu(conv3(m_gis))
    x_hat  = conv3_gamma(e) * x + conv3_beta(e)

Each head ends in a 1x1 convolution to one channel; the three head outputs
are summed into a logit map.  The baseline feeds ``[sar, gis]`` as two input
channels and skips the modulation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .nn.layers import Conv2d, MaxPool2x2, Param, ReLU, UpsampleBilinear, sigmoid


class ConfigError(ValueError):
    pass


@dataclass
class NetConfig:
    n_blocks: int = 5
    block_channels: list[int] = field(default_factory=lambda: [8, 16, 32, 64, 64])
    convs_per_block: list[int] = field(default_factory=lambda: [2, 2, 3, 3, 3])
    tap_blocks: list[int] = field(default_factory=lambda: [3, 4, 5])
    reduced_channels: int = 32
    latent_channels: int = 32
    input_channels: int = 1

    def validate(self) -> None:
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be positive")
        if len(self.block_channels) != self.n_blocks or len(self.convs_per_block) != self.n_blocks:
            raise ConfigError("block_channels and convs_per_block need one entry per block")
        if min(self.block_channels) < 1 or min(self.convs_per_block) < 1:
            raise ConfigError("channel and conv counts must be positive")
        if not self.tap_blocks or any(not 1 <= b <= self.n_blocks for b in self.tap_blocks):
            raise ConfigError(f"tap blocks {self.tap_blocks} must lie in 1..{self.n_blocks}")
        if len(set(self.tap_blocks)) != len(self.tap_blocks):
            raise ConfigError("tap blocks must be distinct")
        if self.reduced_channels < 1 or self.latent_channels < 1 or self.input_channels < 1:
            raise ConfigError("channel counts must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> NetConfig:
        return cls(**d)


class CgModule:
    """Per-pixel affine modulation of features conditioned on a GIS mask."""

    def __init__(self, name: str, channels: int, latent: int, rng, dtype=np.float32):
        self.encoder = Conv2d(f"{name}.encoder", 1, latent, 3, rng, dtype)
        self.relu = ReLU()
        self.gamma = Conv2d(f"{name}.gamma", latent, channels, 3, rng, dtype)
        self.beta = Conv2d(f"{name}.beta", latent, channels, 3, rng, dtype)
        # unit scale where the encoded mask is zero: the module starts near the identity
        self.gamma.bias.value[...] = 1.0

    def params(self) -> list[Param]:
        return self.encoder.params() + self.gamma.params() + self.beta.params()

    def forward(self, x, m):
        if x.shape[1:3] != m.shape[1:3]:
            raise ValueError(f"feature size {x.shape[1:3]} differs from mask size {m.shape[1:3]}")
        e = self.relu(self.encoder(m))
        cols = self.gamma._im2col(e)  # both heads read the same latent map
        g = self.gamma.forward_cols(cols)
        b = self.beta.forward_cols(cols)
        self._x, self._g = x, g
        return g * x + b

    def backward(self, gy, mask_grad: bool = True):
        gx = gy * self._g
        g2 = np.concatenate([self.gamma.backward_params(gy * self._x), self.beta.backward_params(gy)], axis=1)
        mat = np.concatenate([self.gamma._matrix(), self.beta._matrix()], axis=1)
        ge = self.gamma.grad_input(g2, mat, gy.shape[:-1])
        gm = self.encoder.backward(self.relu.backward(ge), mask_grad)
        return gx, gm


class Head:
    def __init__(self, name: str, in_ch: int, cfg: NetConfig, patch_hw, rng, dtype, conditioned: bool):
        c_r = cfg.reduced_channels
        self.reduce = Conv2d(f"{name}.reduce", in_ch, c_r, 1, rng, dtype)
        self.up = UpsampleBilinear(patch_hw)
        self.cg = CgModule(f"{name}.cg", c_r, cfg.latent_channels, rng, dtype) if conditioned else None
        self.out = Conv2d(f"{name}.out", c_r, 1, 1, rng, dtype)

    def params(self) -> list[Param]:
        ps = self.reduce.params()
        if self.cg is not None:
            ps += self.cg.params()
        return ps + self.out.params()

    def forward(self, x, m, normalize: bool = True):
        self.up.target_hw = m.shape[1:3]
        x = self.up(self.reduce(x))
        self._normalized = self.cg is not None and normalize
        if self._normalized:
            x = self.cg.forward(x, m)
        return self.out(x)

    def backward(self, gy, mask_grad: bool = True):
        g = self.out.backward(gy)
        gm = None
        if self._normalized:
            g, gm = self.cg.backward(g, mask_grad)
        return self.reduce.backward(self.up.backward(g)), gm


class Model:
    """CG-Net (``kind='cgnet'``) or the concatenation baseline (``kind='baseline'``)."""

    def __init__(self, config: NetConfig, kind: str, seed: int, dtype=np.float32, patch_hw=(256, 256)):
        config.validate()
        if kind == "cgnet" and config.input_channels != 1:
            raise ConfigError("CG-Net takes the SAR patch alone (input_channels = 1)")
        if kind == "baseline" and config.input_channels != 2:
            raise ConfigError("the baseline takes SAR and GIS concatenated (input_channels = 2)")
        if kind not in ("cgnet", "baseline"):
            raise ConfigError(f"unknown model kind {kind!r}")
        self.config, self.kind, self.seed, self.dtype = config, kind, seed, np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.blocks: list[list] = []
        self.pools: list[MaxPool2x2] = []
        c_in = config.input_channels
        for b, (c, n) in enumerate(zip(config.block_channels, config.convs_per_block), start=1):
            layers = []
            for k in range(n):
                layers += [Conv2d(f"block{b}.conv{k + 1}", c_in, c, 3, rng, dtype), ReLU()]
                c_in = c
            self.blocks.append(layers)
            if b < config.n_blocks:
                self.pools.append(MaxPool2x2())
        self.heads = {
            b: Head(f"head{b}", config.block_channels[b - 1], config, patch_hw, rng, dtype, kind == "cgnet")
            for b in sorted(config.tap_blocks)
        }

    def params(self) -> list[Param]:
        ps = []
        for layers in self.blocks:
            for layer in layers:
                ps += layer.params()
        for b in sorted(self.heads):
            ps += self.heads[b].params()
        return ps

    def n_params(self) -> int:
        return sum(p.value.size for p in self.params())

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def _inputs(self, sar, gis):
        sar = np.asarray(sar, dtype=self.dtype)
        gis = np.asarray(gis, dtype=self.dtype)
        if sar.ndim == 3:
            sar = sar[..., None]
        if gis.ndim == 3:
            gis = gis[..., None]
        if sar.shape != gis.shape:
            raise ValueError(f"SAR {sar.shape} and GIS {gis.shape} patches differ in shape")
        return sar, gis

    def forward(self, sar, gis, normalize: bool = True) -> np.ndarray:
        """Logit map ``(N, H, W, 1)``.  ``normalize=False`` bypasses the CG modules."""
        sar, gis = self._inputs(sar, gis)
        x = np.concatenate([sar, gis], axis=-1) if self.kind == "baseline" else sar
        taps = {}
        for b, layers in enumerate(self.blocks, start=1):
            if b > 1:
                x = self.pools[b - 2](x)
            for layer in layers:
                x = layer(x)
            if b in self.heads:
                taps[b] = x
        self._tap_shapes = {b: t.shape for b, t in taps.items()}
        out = None
        for b in sorted(self.heads):
            y = self.heads[b].forward(taps[b], gis, normalize)
            out = y if out is None else out + y
        return out

    def predict_proba(self, sar, gis) -> np.ndarray:
        return sigmoid(self.forward(sar, gis))[..., 0]

    def backward(self, g_logits, input_grads: bool = True):
        """Accumulate parameter gradients; returns gradients w.r.t. (sar, gis).

        ``input_grads=False`` skips the input gradients (training needs only
        the parameter gradients) and returns ``None``.
        """
        g_logits = np.asarray(g_logits, dtype=self.dtype)
        tap_grads = {}
        g_gis = np.zeros(g_logits.shape, dtype=self.dtype)
        for b in sorted(self.heads):
            gx, gm = self.heads[b].backward(g_logits, input_grads)
            tap_grads[b] = gx
            if gm is not None:
                g_gis += gm
        g = None
        for b in range(len(self.blocks), 0, -1):
            if b in tap_grads:
                g = tap_grads[b] if g is None else g + tap_grads[b]
            if g is None:
                continue
            first = self.blocks[0][0]
            for layer in reversed(self.blocks[b - 1]):
                g = layer.backward(g, False) if layer is first and not input_grads else layer.backward(g)
            if b > 1:
                g = self.pools[b - 2].backward(g)
        if not input_grads:
            return None
        if self.kind == "baseline":
            return g[..., :1], g_gis + g[..., 1:]
        return g, g_gis

    def relu_signature(self):
        """Activation pattern of every ReLU and pooling arg-max (for kink detection)."""
        sig = []
        for layers in self.blocks:
            sig += [layer._mask for layer in layers if isinstance(layer, ReLU)]
        sig += [p._arg for p in self.pools]
        for b in sorted(self.heads):
            if self.heads[b].cg is not None and self.heads[b]._normalized:
                sig.append(self.heads[b].cg.relu._mask)
        return [s.copy() for s in sig]


def build_cgnet(config: NetConfig, seed: int = 0, dtype=np.float32) -> Model:
    return Model(config, "cgnet", seed, dtype)


def build_baseline(config: NetConfig, seed: int = 0, dtype=np.float32) -> Model:
    return Model(config, "baseline", seed, dtype)


def build_model(kind: str, config: NetConfig, seed: int = 0, dtype=np.float32) -> Model:
    return Model(config, kind, seed, dtype)


def conv_params(c_in: int, c_out: int, k: int) -> int:
    return c_in * c_out * k * k + c_out


def cg_module_params(cfg: NetConfig) -> int:
    return conv_params(1, cfg.latent_channels, 3) + 2 * conv_params(cfg.latent_channels, cfg.reduced_channels, 3)


def expected_param_count(cfg: NetConfig, kind: str) -> int:
    """Closed-form parameter count of a model built from ``cfg``."""
    n = 0
    c_in = cfg.input_channels
    for c, k in zip(cfg.block_channels, cfg.convs_per_block):
        for _ in range(k):
            n += conv_params(c_in, c, 3)
            c_in = c
    for b in cfg.tap_blocks:
        n += conv_params(cfg.block_channels[b - 1], cfg.reduced_channels, 1) + conv_params(cfg.reduced_channels, 1, 1)
        if kind == "cgnet":
            n += cg_module_params(cfg)
    return n

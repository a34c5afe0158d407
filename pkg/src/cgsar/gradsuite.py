"""Finite-difference checks of every layer, the CG module and both models in 64-bit."""

from __future__ import annotations

import numpy as np

from .cgnet import CgModule, Head, Model, NetConfig
from .nn import Conv2d, MaxPool2x2, ReLU, Sigmoid, UpsampleBilinear, bce_loss, bce_with_logits, grad_check, sigmoid
from .nn.gradcheck import GradReport

SMALL_NET = dict(block_channels=[4, 6, 6, 8, 8], convs_per_block=[1, 1, 1, 1, 1], reduced_channels=4, latent_channels=3)


def _layer_report(name, layer, x, rng, n_coords, signature=None) -> GradReport:
    w = rng.normal(size=layer.forward(x).shape)
    arrays = {"x": x, **{p.name: p.value for p in layer.params()}}

    def loss():
        return float(np.sum(w * layer.forward(x)))

    def analytic():
        for p in layer.params():
            p.zero_grad()
        layer.forward(x)
        return {"x": layer.backward(w), **{p.name: p.grad.copy() for p in layer.params()}}

    return grad_check(loss, analytic, arrays, n_coords=n_coords, signature=signature, name=name)


def _away_from_zero(x):
    x[np.abs(x) < 1e-2] = 0.5
    return x


def _cg_report(rng, n_coords) -> GradReport:
    cg = CgModule("cg", 4, 3, rng, np.float64)
    x = rng.normal(size=(2, 6, 6, 4))
    m = (rng.random((2, 6, 6, 1)) > 0.5).astype(float)
    w = rng.normal(size=x.shape)
    arrays = {"x": x, "m_gis": m, **{p.name: p.value for p in cg.params()}}

    def loss():
        return float(np.sum(w * cg.forward(x, m)))

    def analytic():
        for p in cg.params():
            p.zero_grad()
        cg.forward(x, m)
        gx, gm = cg.backward(w)
        return {"x": gx, "m_gis": gm, **{p.name: p.grad.copy() for p in cg.params()}}

    return grad_check(loss, analytic, arrays, n_coords=n_coords, signature=lambda: cg.relu._mask.copy(), name="cg_module")


def _head_report(rng, n_coords) -> GradReport:
    cfg = NetConfig(**SMALL_NET)
    head = Head("head", 6, cfg, (12, 12), rng, np.float64, conditioned=True)
    x = rng.normal(size=(2, 3, 3, 6))
    m = (rng.random((2, 12, 12, 1)) > 0.5).astype(float)
    w = rng.normal(size=(2, 12, 12, 1))
    arrays = {"x": x, "m_gis": m, **{p.name: p.value for p in head.params()}}

    def loss():
        return float(np.sum(w * head.forward(x, m)))

    def analytic():
        for p in head.params():
            p.zero_grad()
        head.forward(x, m)
        gx, gm = head.backward(w)
        return {"x": gx, "m_gis": gm, **{p.name: p.grad.copy() for p in head.params()}}

    return grad_check(loss, analytic, arrays, n_coords=n_coords, signature=lambda: head.cg.relu._mask.copy(), name="cg_head")


def _model_report(kind, rng, n_coords) -> GradReport:
    cfg = NetConfig(**SMALL_NET, input_channels=1 if kind == "cgnet" else 2)
    model = Model(cfg, kind, int(rng.integers(2**31)), np.float64, (16, 16))
    sar = rng.random((2, 16, 16, 1))
    gis = (rng.random((2, 16, 16, 1)) > 0.5).astype(float)
    y = (rng.random((2, 16, 16, 1)) > 0.5).astype(float)

    def loss():
        return bce_loss(sigmoid(model.forward(sar, gis)), y)[0]

    def analytic():
        model.zero_grad()
        _, gz = bce_with_logits(model.forward(sar, gis), y)
        g_sar, g_gis = model.backward(gz)
        return {"sar": g_sar, "gis": g_gis, **{p.name: p.grad.copy() for p in model.params()}}

    arrays = {"sar": sar, "gis": gis, **{p.name: p.value for p in model.params()}}
    return grad_check(loss, analytic, arrays, n_coords=n_coords, signature=model.relu_signature, name=f"model_{kind}")


def _bce_report(rng, n_coords) -> GradReport:
    p = rng.uniform(0.05, 0.95, size=(2, 4, 4, 1))
    y = (rng.random(p.shape) > 0.5).astype(float)
    _, g = bce_loss(p, y)
    return grad_check(lambda: bce_loss(p, y)[0], lambda: {"p": g}, {"p": p}, n_coords=n_coords, name="bce_loss")


def run_suite(seed: int = 0, n_coords: int = 60) -> list[GradReport]:
    rng = np.random.default_rng(seed)
    conv3 = Conv2d("conv3", 3, 2, 3, rng, np.float64)
    conv3.bias.value[...] = rng.normal(size=2)
    conv1 = Conv2d("conv1", 3, 2, 1, rng, np.float64)
    conv1.bias.value[...] = rng.normal(size=2)
    pool = MaxPool2x2()
    reports = [
        _layer_report("conv3x3", conv3, rng.normal(size=(2, 5, 5, 3)), rng, n_coords),
        _layer_report("conv1x1", conv1, rng.normal(size=(2, 5, 5, 3)), rng, n_coords),
        _layer_report(
            "maxpool2x2", pool, rng.permutation(2 * 6 * 5 * 2).reshape(2, 6, 5, 2).astype(float), rng, n_coords,
            signature=lambda: pool._arg.copy(),
        ),
        _layer_report("upsample_bilinear", UpsampleBilinear((7, 9)), rng.normal(size=(2, 3, 4, 2)), rng, n_coords),
        _layer_report("relu", ReLU(), _away_from_zero(rng.normal(size=(2, 4, 4, 2))), rng, n_coords),
        _layer_report("sigmoid", Sigmoid(), rng.normal(size=(2, 4, 4, 2)), rng, n_coords),
        _bce_report(rng, n_coords),
        _cg_report(rng, n_coords),
        _head_report(rng, n_coords),
        _model_report("cgnet", rng, 2 * n_coords),
        _model_report("baseline", rng, 2 * n_coords),
    ]
    return reports

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cgsar.nn import (
    CheckpointError,
    Conv2d,
    MaxPool2x2,
    Nadam,
    NonFiniteGradient,
    Param,
    ReLU,
    Sigmoid,
    UpsampleBilinear,
    bce_loss,
    bce_with_logits,
    glorot_uniform,
    grad_check,
    load_into,
    read_checkpoint,
    save_checkpoint,
    sigmoid,
)


def rng(seed=0):
    return np.random.default_rng(seed)


def check_layer(layer, x, n_coords=60, signature=None):
    """Finite-difference check of a layer under the loss sum(w * layer(x))."""
    w = rng(9).normal(size=layer.forward(x).shape)
    arrays = {"x": x, **{p.name: p.value for p in layer.params()}}

    def loss():
        return float(np.sum(w * layer.forward(x)))

    def analytic():
        for p in layer.params():
            p.zero_grad()
        layer.forward(x)
        gx = layer.backward(w)
        return {"x": gx, **{p.name: p.grad.copy() for p in layer.params()}}

    return grad_check(loss, analytic, arrays, n_coords=n_coords, signature=signature)


# ------------------------------------------------------------------ conv2d


def test_identity_1x1_conv():
    conv = Conv2d("c", 3, 3, 1, rng(), np.float64)
    conv.weight.value[...] = np.eye(3)[:, :, None, None]
    x = rng().normal(size=(2, 4, 5, 3))
    assert np.array_equal(conv.forward(x), x)


def test_all_ones_kernel_on_constant_input():
    conv = Conv2d("c", 1, 1, 3, rng(), np.float64)
    conv.weight.value[...] = 1.0
    y = conv.forward(np.ones((1, 5, 5, 1)))
    assert y[0, 2, 2, 0] == 9.0
    assert y[0, 0, 0, 0] == 4.0  # zero padding at the corner


def test_conv_is_cross_correlation():
    conv = Conv2d("c", 1, 1, 3, rng(), np.float64)
    conv.weight.value[...] = 0.0
    conv.weight.value[0, 0, 0, 2] = 1.0  # top-right tap reads x[i-1, j+1]
    x = rng().normal(size=(1, 4, 4, 1))
    y = conv.forward(x)
    assert y[0, 1, 1, 0] == x[0, 0, 2, 0]


@pytest.mark.parametrize("k", [1, 3])
def test_conv_gradient(k):
    conv = Conv2d("c", 3, 2, k, rng(1), np.float64)
    conv.bias.value[...] = rng(2).normal(size=2)
    report = check_layer(conv, rng(3).normal(size=(2, 5, 5, 3)))
    assert report.max_rel_error < 1e-4
    assert report.max_rel_error < 1e-7  # linear map: only rounding error


def test_conv_rejects_wrong_channels():
    with pytest.raises(ValueError):
        Conv2d("c", 3, 2, 3, rng()).forward(np.zeros((1, 4, 4, 2)))
    with pytest.raises(ValueError):
        Conv2d("c", 3, 2, 5, rng())


def test_skipped_input_gradient_still_accumulates_parameters():
    a = Conv2d("a", 2, 3, 3, rng(4), np.float64)
    b = Conv2d("b", 2, 3, 3, rng(4), np.float64)
    x = rng(5).normal(size=(1, 6, 6, 2))
    g = rng(6).normal(size=(1, 6, 6, 3))
    a.forward(x)
    b.forward(x)
    assert a.backward(g, input_grad=False) is None
    b.backward(g)
    assert np.array_equal(a.weight.grad, b.weight.grad) and np.array_equal(a.bias.grad, b.bias.grad)


# ------------------------------------------------------------------ pooling


def test_maxpool_picks_max():
    y = MaxPool2x2().forward(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
    assert y.ravel().tolist() == [4.0]


def test_maxpool_tie_goes_to_first_position():
    pool = MaxPool2x2()
    pool.forward(np.ones((1, 4, 4, 1)))
    g = pool.backward(np.ones((1, 2, 2, 1)))[0, :, :, 0]
    assert g.tolist() == [[1, 0, 1, 0], [0, 0, 0, 0], [1, 0, 1, 0], [0, 0, 0, 0]]


def test_maxpool_odd_size_pads_with_minus_infinity():
    x = -np.arange(9.0).reshape(1, 3, 3, 1) - 5
    y = MaxPool2x2().forward(x)
    assert y.shape == (1, 2, 2, 1) and y[0, 1, 1, 0] == -13.0


def test_maxpool_gradient():
    pool = MaxPool2x2()
    x = rng(7).permutation(2 * 6 * 5 * 3).reshape(2, 6, 5, 3).astype(float)  # distinct values, no ties
    report = check_layer(pool, x, signature=lambda: pool._arg.copy())
    assert report.max_rel_error < 1e-4 and report.checked >= 50


# ------------------------------------------------------------------ upsample


def test_upsample_constant_extension():
    y = UpsampleBilinear((2, 2)).forward(np.full((1, 1, 1, 1), 3.5))
    assert np.all(y == 3.5)


def test_upsample_ramp_linear_in_interior():
    x = np.arange(8.0).reshape(1, 1, 8, 1) * np.ones((1, 4, 1, 1))
    y = UpsampleBilinear((8, 16)).forward(x)[0, 0, :, 0]
    d = np.diff(y[1:-1])
    assert np.allclose(d, 0.5)


def test_upsample_gradient_is_transpose():
    up = UpsampleBilinear((7, 9))
    report = check_layer(up, rng(8).normal(size=(2, 3, 4, 2)))
    assert report.max_rel_error < 1e-7


def test_upsample_rejects_shrinking():
    with pytest.raises(ValueError):
        UpsampleBilinear((2, 2)).forward(np.zeros((1, 4, 4, 1)))


# --------------------------------------------------------------- activations


def test_relu_values_and_kink():
    r = ReLU()
    assert r.forward(np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]
    assert r.backward(np.ones(3)).tolist() == [0.0, 0.0, 1.0]


def test_sigmoid_stable():
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        s = sigmoid(np.array([-1000.0, -500.0, 0.0, 500.0, 1000.0]))
    assert s[2] == 0.5 and s[0] == 0.0 and s[-1] == 1.0
    assert np.all(np.isfinite(s))


def test_activation_gradients():
    x = rng(10).normal(size=(2, 3, 3, 2))
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the ReLU kink
    assert check_layer(ReLU(), x.copy()).max_rel_error < 1e-4
    assert check_layer(Sigmoid(), x.copy()).max_rel_error < 1e-4


# ---------------------------------------------------------------------- BCE


def test_bce_values():
    loss, _ = bce_loss(np.array([0.5]), np.array([1.0]))
    assert loss == pytest.approx(math.log(2), abs=1e-4)
    loss, _ = bce_loss(np.array([1.0]), np.array([1.0]))
    assert loss == pytest.approx(0.0, abs=1e-6)


def test_bce_shape_mismatch():
    with pytest.raises(ValueError):
        bce_loss(np.zeros(3), np.zeros(4))


def test_bce_gradient():
    p = rng(11).uniform(0.05, 0.95, size=(3, 4))
    y = (rng(12).random((3, 4)) > 0.5).astype(float)
    _, g = bce_loss(p, y)
    report = grad_check(lambda: bce_loss(p, y)[0], lambda: {"p": g}, {"p": p}, n_coords=50)
    assert report.max_rel_error < 1e-4


def test_fused_logit_gradient_matches_chain_rule():
    z = rng(13).normal(size=(2, 5))
    y = (rng(14).random((2, 5)) > 0.5).astype(float)
    p = sigmoid(z)
    loss_a, gp = bce_loss(p, y)
    loss_b, gz = bce_with_logits(z, y)
    assert loss_a == pytest.approx(loss_b)
    assert np.allclose(gz, gp * p * (1 - p))


# -------------------------------------------------------------------- Glorot


def test_glorot_bound_and_determinism():
    w = glorot_uniform((1, 1, 3, 3), rng(1))
    a = math.sqrt(6 / 18)
    assert a == pytest.approx(0.5774, abs=1e-4)
    assert np.all(np.abs(w) <= a)
    assert np.array_equal(w, glorot_uniform((1, 1, 3, 3), rng(1)))


def test_glorot_mean_near_zero():
    w = glorot_uniform((1000, 1000), rng(2))
    a = math.sqrt(6 / 2000)
    sigma = a / math.sqrt(3)
    assert abs(w.mean()) < 3 * sigma / math.sqrt(w.size)


# --------------------------------------------------------------------- Nadam


def test_nadam_zero_gradient_keeps_params():
    p = Param("p", np.array([1.5, -2.0]))
    Nadam([p]).step(0.1)
    assert p.value.tolist() == [1.5, -2.0]


def test_nadam_first_step_hand_trace():
    p = Param("p", np.array([0.0]))
    p.grad[...] = 1.0
    Nadam([p]).step(0.1)
    assert p.value[0] == pytest.approx(-0.14737, abs=1e-5)


def test_nadam_steps_shrink_with_constant_gradient():
    p = Param("p", np.array([0.0]))
    opt = Nadam([p])
    deltas = []
    for _ in range(3):
        before = p.value[0]
        p.grad[...] = 1.0
        opt.step(0.1)
        deltas.append(abs(p.value[0] - before))
    assert deltas[0] > deltas[1] > deltas[2]


def test_nadam_non_finite_gradient_names_param():
    p = Param("block1.conv1.weight", np.zeros(2))
    p.grad[0] = np.nan
    with pytest.raises(NonFiniteGradient, match="block1.conv1.weight"):
        Nadam([p]).step(0.1)


# -------------------------------------------------------------- checkpoints


@settings(max_examples=25, deadline=None)
@given(st.lists(st.lists(st.integers(1, 4), min_size=0, max_size=3), min_size=1, max_size=5), st.integers(0, 2**31 - 1))
def test_checkpoint_round_trip_bit_exact(tmp_path_factory, shapes, seed):
    r = rng(seed)
    params = [Param(f"p{i}", r.normal(size=tuple(s)).astype(np.float32)) for i, s in enumerate(shapes)]
    path = tmp_path_factory.mktemp("ck") / "m.cgn"
    save_checkpoint(path, {"kind": "test"}, params, seed, 17)
    header, arrays = read_checkpoint(path)
    assert header["seed"] == seed and header["step"] == 17 and header["config"] == {"kind": "test"}
    for p in params:
        assert arrays[p.name].tobytes() == p.value.tobytes()
    data = path.read_bytes()
    save_checkpoint(path, {"kind": "test"}, params, seed, 17)
    assert path.read_bytes() == data


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "bad.cgn"
    p.write_bytes(b"XXXX")
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(p)
    params = [Param("w", np.ones((2, 2), np.float32))]
    save_checkpoint(p, {}, params, 0, 0)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(p)
    with pytest.raises(CheckpointError, match="missing"):
        load_into([Param("other", np.zeros(1, np.float32))], {"w": np.ones((2, 2), np.float32)})

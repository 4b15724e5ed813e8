import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_model
from maxmin_attack.errors import LabelError, ShapeError
from maxmin_attack.nn import (Conv2D, Dense, Model, ReLU, conv2d_backward, conv2d_forward,
                              dense_backward, dense_forward, input_gradient, relu, relu_backward,
                              softmax_xent, softmax_xent_backward)
from oracles import central_diff, naive_conv, rel_err

TRIALS = 100


# ---------------------------------------------------------------- conv

def test_conv_scalar_kernel_doubles():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = conv2d_forward(x, np.full((1, 1, 1, 1), 2.0), np.zeros(1), 1)
    np.testing.assert_array_equal(out, [[[[2, 4], [6, 8]]]])


def test_conv_ones_kernel_is_box_sum(rng):
    x = rng.normal(size=(2, 1, 5, 4))
    out = conv2d_forward(x, np.ones((1, 1, 2, 2)), np.zeros(1), 1)
    box = x[:, :, :-1, :-1] + x[:, :, 1:, :-1] + x[:, :, :-1, 1:] + x[:, :, 1:, 1:]
    np.testing.assert_allclose(out, box, atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_nested_loops(rng, stride):
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    np.testing.assert_allclose(conv2d_forward(x, w, b, stride), naive_conv(x, w, b, stride),
                               rtol=0, atol=1e-12)


def test_conv_backward_zero_grad(rng):
    x, w = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    for g in conv2d_backward(np.zeros((1, 3, 3, 3)), x, w, 1):
        assert not np.any(g)


def test_conv_backward_scalar_kernel_weight_grad():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    w = np.full((1, 1, 1, 1), 2.0)
    _, gw, gb = conv2d_backward(np.ones((1, 1, 2, 2)), x, w, 1)
    assert gw.item() == 10.0 and gb.item() == 4.0
    b = np.zeros(1)
    fd = central_diff(lambda: conv2d_forward(x, w, b, 1).sum(), w, 1e-6)
    assert abs(fd[0] - 10.0) < 1e-6


def test_conv_backward_finite_differences():
    worst = 0.0
    for trial in range(TRIALS):
        r = np.random.default_rng(trial)
        stride = 1 + trial % 2
        x = r.normal(size=(2, 2, 5, 6))
        w = r.normal(size=(3, 2, 3, 3))
        b = r.normal(size=3)
        probe = r.normal(size=conv2d_forward(x, w, b, stride).shape)
        gi, gw, gb = conv2d_backward(probe, x, w, stride)
        f = lambda: float(np.sum(conv2d_forward(x, w, b, stride) * probe))  # noqa: E731
        for analytic, wrt in ((gi, x), (gw, w), (gb, b)):
            worst = max(worst, rel_err(analytic, central_diff(f, wrt, 1e-6)))
    assert worst < 1e-5


@pytest.mark.parametrize("bad, dim", [
    (dict(x=(1, 3, 5, 5)), "channels"),
    (dict(w=(2, 2, 6, 3)), "height"),
    (dict(b=(3,)), "bias"),
    (dict(x=(2, 5, 5)), "rank"),
])
def test_conv_shape_errors_name_dimension(bad, dim):
    x = np.zeros(bad.get("x", (1, 2, 5, 5)))
    w = np.zeros(bad.get("w", (2, 2, 3, 3)))
    b = np.zeros(bad.get("b", (2,)))
    with pytest.raises(ShapeError) as info:
        conv2d_forward(x, w, b, 1)
    assert info.value.dimension == dim


# ---------------------------------------------------------------- relu

def test_relu_examples():
    np.testing.assert_array_equal(relu([-1.0, 0.0, 2.0]), [0, 0, 2])
    np.testing.assert_array_equal(relu_backward([5.0, 5.0, 5.0], [-1.0, 0.0, 2.0]), [0, 0, 5])


def test_relu_finite_differences():
    h = 1e-6
    for trial in range(TRIALS):
        r = np.random.default_rng(trial)
        x = r.normal(size=20)
        x = x[np.abs(x) > 1e-4]  # dead zone around the kink
        probe = r.normal(size=x.shape)
        fd = central_diff(lambda: float(np.sum(relu(x) * probe)), x, h)
        assert rel_err(relu_backward(probe, x), fd) < 1e-5


# ---------------------------------------------------------------- dense

def test_dense_examples(rng):
    x = rng.normal(size=4)
    np.testing.assert_array_equal(dense_forward(x, np.eye(4), np.zeros(4)), x)
    np.testing.assert_array_equal(dense_forward([1.0, 1.0], [[1, 2], [3, 4]], [0, 0]), [3, 7])


def test_dense_finite_differences():
    for trial in range(TRIALS):
        r = np.random.default_rng(trial)
        x, w, b = r.normal(size=(3, 5)), r.normal(size=(4, 5)), r.normal(size=4)
        probe = r.normal(size=(3, 4))
        gi, gw, gb = dense_backward(probe, x, w)
        f = lambda: float(np.sum(dense_forward(x, w, b) * probe))  # noqa: E731
        for analytic, wrt in ((gi, x), (gw, w), (gb, b)):
            assert rel_err(analytic, central_diff(f, wrt, 1e-6)) < 1e-5


def test_dense_shape_error():
    with pytest.raises(ShapeError) as info:
        dense_forward(np.zeros(3), np.zeros((2, 4)), np.zeros(2))
    assert info.value.dimension == "in_features"


# ---------------------------------------------------------------- loss

def test_xent_uniform_and_stable():
    assert softmax_xent([0.0, 0.0], 0).scalar == pytest.approx(math.log(2), abs=1e-12)
    big = softmax_xent([1000.0, 0.0], 0)
    assert np.isfinite(big.scalar) and big.scalar < 1e-300 + 1e-12
    assert np.all(np.isfinite(big.probabilities))


def test_xent_backward_finite_differences():
    for trial in range(TRIALS):
        r = np.random.default_rng(trial)
        z = r.normal(0, 3, size=6)
        y = int(r.integers(6))
        fd = central_diff(lambda: softmax_xent(z, y).scalar, z, 1e-6)
        assert rel_err(softmax_xent_backward(z, y), fd) < 1e-6


def test_xent_label_error():
    with pytest.raises(LabelError):
        softmax_xent([0.0, 1.0], 2)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(2, 12), elements=st.floats(-1e4, 1e4)),
       st.integers(0, 11))
def test_softmax_sums_to_one(z, y):
    probs = softmax_xent(z, y % len(z)).probabilities
    assert abs(probs.sum() - 1.0) < 1e-9
    assert np.all(probs >= 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_forward_is_deterministic(seed):
    model = random_model(seed % 1000)
    x = np.random.default_rng(seed).uniform(0, 255, (3, 1, 8, 8))
    assert np.array_equal(model.logits(x), model.logits(x.copy()))


# ---------------------------------------------------------------- end-to-end input gradient

def _relu_masks(model, x):
    a = x[None] * model.input_scale
    masks = []
    for layer in model.layers:
        if layer.kind == "relu":
            masks.append(a > 0)
        a = layer.forward(a)
    return masks


def _alive(model, x, coord, h):
    """True when no ReLU changes state between x - h and x + h at pixel ``coord``."""
    flat = x.reshape(-1)
    old = flat[coord]
    flat[coord] = old + h
    up = _relu_masks(model, x)
    flat[coord] = old - h
    down = _relu_masks(model, x)
    flat[coord] = old
    return all(np.array_equal(u, d) for u, d in zip(up, down))


def test_input_gradient_finite_differences():
    h = 1e-4
    checked = 0
    for trial in range(TRIALS):
        model = random_model(trial)
        r = np.random.default_rng(10_000 + trial)
        x = r.uniform(0, 255, (1, 8, 8))
        # least likely class: a saturated loss has gradients below the difference noise floor
        y = int(np.argmin(model.logits(x)))
        coords = [c for c in r.choice(x.size, 16, replace=False) if _alive(model, x, c, h)]
        if not coords:
            continue
        grad = input_gradient(model, x, y).reshape(-1)[coords]
        fd = central_diff(lambda: float(model.losses(x, y)), x, h, coords)
        assert rel_err(grad, fd) < 1e-5, trial
        checked += 1
    assert checked >= TRIALS * 0.9


def test_batch_gradients_match_single_images(rng):
    model = random_model(3)
    x = rng.uniform(0, 255, (4, 1, 8, 8))
    y = np.array([0, 1, 2, 3])
    losses, grads = model.loss_and_input_grad(x, y)
    for i in range(4):
        li, gi = model.loss_and_input_grad(x[i], y[i])
        assert li == pytest.approx(losses[i], abs=1e-12)
        np.testing.assert_allclose(gi, grads[i], atol=1e-12)


def test_param_gradients_finite_differences():
    for trial in range(TRIALS // 4):
        model = random_model(trial)
        r = np.random.default_rng(trial)
        x = r.uniform(0, 255, (3, 1, 8, 8))
        y = r.integers(model.num_classes, size=3)
        _, grads = model.loss_and_param_grads(x, y)
        for p, g in zip(model.params, grads):
            coords = r.choice(p.size, min(p.size, 6), replace=False)
            fd = central_diff(lambda: model.loss_and_param_grads(x, y)[0], p, 1e-6, coords)
            assert rel_err(g.reshape(-1)[coords], fd) < 1e-5


def test_linear_model_gradient_closed_form(rng):
    w = rng.normal(size=(3, 5))
    b = rng.normal(size=3)
    model = Model("lin", [Dense(w, b)], (1, 1, 5), 3)
    x = rng.uniform(0, 255, (1, 1, 5))
    z = w @ (x.reshape(-1) / 255.0) + b
    p = np.exp(z - z.max())
    p /= p.sum()
    p[1] -= 1.0
    np.testing.assert_allclose(input_gradient(model, x, 1).reshape(-1), w.T @ p / 255.0,
                               rtol=1e-12, atol=1e-15)


def test_zero_image_gradient_finite():
    layers = [Conv2D(np.full((2, 1, 3, 3), 0.1), np.zeros(2)), ReLU(),
              Dense(np.full((3, 2 * 6 * 6), 0.01), np.zeros(3))]
    model = Model("sym", layers, (1, 8, 8), 3)
    g = input_gradient(model, np.zeros((1, 8, 8)), 0)
    assert g.shape == (1, 8, 8) and np.all(np.isfinite(g))


def test_model_rejects_wrong_width():
    with pytest.raises(ShapeError):
        Model("bad", [Dense(np.zeros((4, 5)), np.zeros(4))], (1, 1, 5), 3)

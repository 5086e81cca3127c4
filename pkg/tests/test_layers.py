import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from jointface.checks import (check_conv, check_dropout, check_linear, check_mse, check_pool,
                              check_smooth_l1, check_softmax_ce)
from jointface.errors import InvalidLabel, InvalidRatio, MissingGradient, ShapeMismatch
from jointface.losses import mse_loss, smooth_l1, smooth_l1_grad, smooth_l1_loss, softmax_ce_loss
from jointface.nn import Conv2d, Linear, Module, conv2d, conv_output_size, dropout, maxpool_forward, maxpool2d
from jointface.optim import SGDState, sgd_step
from jointface.tensor import Tensor, backward


def brute_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = conv_output_size(h, kh, stride, pad), conv_output_size(wd, kw, stride, pad)
    out = np.zeros((n, o, oh, ow))
    for i in range(n):
        for k in range(o):
            for r in range(oh):
                for s in range(ow):
                    patch = xp[i, :, r * stride:r * stride + kh, s * stride:s * stride + kw]
                    out[i, k, r, s] = (patch * w[k]).sum() + b[k]
    return out


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((1, 1, 3, 3))
    assert np.array_equal(conv2d(x, np.ones((1, 1, 1, 1))).data, x)


def test_conv_hand_case():
    out = conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 2, 2)), stride=2).data
    assert out.shape == (1, 1, 2, 2) and np.all(out == 4.0)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))


@given(st.integers(3, 9), st.integers(1, 3), st.integers(0, 2), st.sampled_from([1, 3]), st.integers(0, 10_000))
def test_conv_matches_bruteforce(size, stride, pad, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, size, size + 1))
    w = rng.standard_normal((3, 2, k, k))
    b = rng.standard_normal(3)
    out = conv2d(x, w, b, stride, pad).data
    assert out.shape[2] == conv_output_size(size, k, stride, pad)
    assert np.allclose(out, brute_conv(x, w, b, stride, pad), atol=1e-12)


def test_maxpool_hand_case():
    out, mask = maxpool_forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), 2)
    assert out.data.item() == 4.0 and mask.item() == 3  # flat index of (1, 1)


def test_maxpool_tie_goes_first():
    out, mask = maxpool_forward(np.full((1, 1, 2, 2), 7.0), 2)
    assert out.data.item() == 7.0 and mask.item() == 0


def test_maxpool_window_one_is_identity(rng):
    x = rng.standard_normal((1, 2, 3, 4))
    assert np.array_equal(maxpool2d(x, 1, 1).data, x)


def test_maxpool_window_too_big():
    with pytest.raises(ShapeMismatch):
        maxpool2d(np.ones((1, 1, 2, 2)), 3)


def test_maxpool_backward_routes_to_argmax():
    x = Tensor(np.array([[[[1.0, 5.0], [3.0, 2.0]]]]), requires_grad=True)
    backward(maxpool2d(x, 2).sum())
    assert x.grad.tolist() == [[[[0.0, 1.0], [0.0, 0.0]]]]


def test_mse_cases():
    assert mse_loss(np.array([[1.0, -1.0]]), np.array([[1.0, -1.0]])).item() == 0.0
    assert mse_loss(np.zeros((1, 2)), np.array([[1.0, -1.0]])).item() == 1.0
    assert mse_loss(np.zeros((1, 3)), np.zeros((1, 3))).item() == 0.0


def test_mse_rejects_bad_labels_and_shapes():
    with pytest.raises(InvalidLabel):
        mse_loss(np.zeros((1, 2)), np.array([[0.5, 1.0]]))
    with pytest.raises(ShapeMismatch):
        mse_loss(np.zeros((1, 2)), np.zeros((2, 1)))


def test_mse_row_mask_ignores_background():
    pred = np.array([[0.0, 0.0], [5.0, 5.0]])
    target = np.array([[1.0, -1.0], [0.0, 0.0]])
    assert mse_loss(pred, target, row_mask=[True, False]).item() == 1.0


def test_softmax_ce_cases():
    assert math.isclose(softmax_ce_loss(np.zeros((1, 2)), [1]).item(), math.log(2), rel_tol=1e-12)
    assert softmax_ce_loss(np.array([[-1000.0, 1000.0]]), [1]).item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(InvalidLabel):
        softmax_ce_loss(np.zeros((1, 2)), [2])


@given(st.floats(-50, 50), st.integers(0, 1000))
def test_softmax_ce_shift_invariance(c, seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((4, 2)) * 3
    labels = rng.integers(0, 2, 4)
    assert abs(softmax_ce_loss(logits, labels).item() - softmax_ce_loss(logits + c, labels).item()) < 1e-9


def test_smooth_l1_values():
    assert smooth_l1(np.array([0.0, 0.5, 2.0])).tolist() == [0.0, 0.125, 1.5]


def test_smooth_l1_c1_at_transition():
    for side in (1.0, -1.0):
        lo, hi = side * (1 - 1e-13), side * (1 + 1e-13)
        assert abs(smooth_l1(np.array(lo)) - smooth_l1(np.array(hi))) < 1e-12
        assert abs(smooth_l1_grad(np.array(lo)) - smooth_l1_grad(np.array(hi))) < 1e-12


def test_smooth_l1_loss_masks_and_normalizes():
    pred = np.array([[2.0, 0, 0, 0], [0.5, 0, 0, 0], [9.0, 9, 9, 9]])
    loss = smooth_l1_loss(pred, np.zeros((3, 4)), mask=[True, True, False]).item()
    assert loss == pytest.approx((1.5 + 0.125) / 2)
    assert smooth_l1_loss(pred, np.zeros((3, 4)), mask=[False] * 3).item() == 0.0


def test_dropout_modes(rng):
    x = rng.standard_normal((5, 5))
    assert np.array_equal(dropout(x, 0.5, train=False).data, x)
    assert np.array_equal(dropout(x, 0.0, train=True, rng=rng).data, x)
    a = dropout(x, 0.5, True, np.random.default_rng(9)).data
    b = dropout(x, 0.5, True, np.random.default_rng(9)).data
    assert np.array_equal(a, b)
    with pytest.raises(InvalidRatio):
        dropout(x, 1.0)


def test_dropout_preserves_expectation():
    out = dropout(np.ones(100_000), 0.5, True, np.random.default_rng(0)).data
    assert abs(out.mean() - 1.0) < 0.01


def test_sgd_update_rule():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([1.0])
    sgd_step([p], SGDState(base_lr=0.1, momentum=0.0))
    assert p.data.tolist() == [0.9] and p.grad is None


def test_sgd_zero_grad_and_missing():
    p = Tensor([2.0], requires_grad=True)
    p.grad = np.zeros(1)
    state = SGDState(base_lr=0.1)
    sgd_step({"p": p}, state)
    assert p.data.tolist() == [2.0] and state.iteration == 1
    with pytest.raises(MissingGradient):
        sgd_step({"p": p}, state)


def test_sgd_momentum_accumulates():
    p = Tensor([0.0], requires_grad=True)
    state = SGDState(base_lr=1.0, momentum=0.9)
    for _ in range(2):
        p.grad = np.array([1.0])
        sgd_step([p], state)
    assert p.data[0] == pytest.approx(-(1.0 + 1.9))


@given(st.lists(st.integers(0, 200), min_size=0, max_size=4, unique=True), st.integers(0, 250))
def test_lr_schedule_closed_form(decays, t):
    decays = sorted(decays)
    state = SGDState(base_lr=0.001, decay_factor=0.1, decay_iters=tuple(decays))
    assert state.lr_at(t) == 0.001 * 0.1 ** sum(d <= t for d in decays)


def test_lr_drops_at_decay_iteration():
    state = SGDState(base_lr=1.0, decay_iters=(3,))
    assert [state.lr_at(t) for t in range(5)] == [1.0, 1.0, 1.0, 0.1, 0.1]


def test_module_parameter_names_and_shapes(rng):
    class Net(Module):
        def __init__(self):
            super().__init__()
            self.conv = Conv2d(1, 2, 3, padding=1, rng=rng)
            self.fc = Linear(8, 3, rng=rng)

    names = list(Net().parameters())
    assert names == ["conv.weight", "conv.bias", "fc.weight", "fc.bias"]
    fc = Linear(8, 3, rng=rng)
    assert fc.weight.shape == (8, 3)  # rows == incoming feature dimension


def test_kaiming_scale():
    conv = Conv2d(16, 64, 3, rng=np.random.default_rng(0))
    std = conv.weight.data.std()
    assert abs(std - math.sqrt(2 / (16 * 9))) / math.sqrt(2 / (16 * 9)) < 0.1


@pytest.mark.parametrize("check", [check_conv, check_pool, check_linear, check_dropout,
                                   check_mse, check_softmax_ce, check_smooth_l1])
def test_layer_gradchecks(check):
    for seed in range(3):
        assert check(seed).passed

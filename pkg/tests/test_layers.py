import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cpcnn import layers as L
from cpcnn.tensor import ShapeError, Tape, Tensor, backward, mul, tensor_sum


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def conv_oracle(x, w, b, stride, pad):
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = b[oc]
                for ic in range(c):
                    for a in range(k):
                        for bb in range(k):
                            acc += w[oc, ic, a, bb] * xp[ic, i * stride + a, j * stride + bb]
                out[oc, i, j] = acc
    return out


def tconv_oracle(x, w, b):
    cin, h, wd = x.shape
    cout = w.shape[1]
    out = np.zeros((cout, 2 * h, 2 * wd)) + b[:, None, None]
    for ic in range(cin):
        for i in range(h):
            for j in range(wd):
                for a in range(4):
                    for bb in range(4):
                        r, c = 2 * i - 1 + a, 2 * j - 1 + bb
                        if 0 <= r < 2 * h and 0 <= c < 2 * wd:
                            out[:, r, c] += x[ic, i, j] * w[ic, :, a, bb]
    return out


# ---------------------------------------------------------------- conv


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 5, 4))
    y = L.conv2d(t64(x), t64(np.ones((1, 1, 1, 1))), t64([0.0]))
    np.testing.assert_array_equal(y.data, x)


def test_conv_ones_kernel_small_example():
    x = t64([[[1.0, 2.0], [3.0, 4.0]]])
    y = L.conv2d(x, t64(np.ones((1, 1, 3, 3))), t64([0.0]), padding=1)
    # every output tap of a 3x3 window on a 2x2 image sees all four pixels
    np.testing.assert_array_equal(y.data, [[[10, 10], [10, 10]]])
    np.testing.assert_allclose(y.data[0], conv_oracle(x.data, np.ones((1, 1, 3, 3)), [0.0], 1, 1)[0])


def test_conv_zero_input_gives_bias():
    y = L.conv2d(t64(np.zeros((2, 6, 6))), t64(np.ones((3, 2, 3, 3))), t64([0.5, -1.0, 2.0]))
    for c, b in enumerate([0.5, -1.0, 2.0]):
        assert np.all(y.data[c] == b)


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (5, 1, 2), (3, 2, 1), (5, 2, 2), (1, 1, 0), (3, 1, 0)])
def test_conv_matches_direct_summation(k, stride, pad):
    rng = np.random.default_rng(k * 10 + stride)
    x = rng.standard_normal((2, 9, 7))
    w, b = rng.standard_normal((3, 2, k, k)), rng.standard_normal(3)
    y = L.conv2d(t64(x), t64(w), t64(b), stride=stride, padding=pad)
    np.testing.assert_allclose(y.data, conv_oracle(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_batched_matches_single():
    rng = np.random.default_rng(3)
    x, w, b = rng.standard_normal((3, 2, 8, 8)), rng.standard_normal((4, 2, 3, 3)), rng.standard_normal(4)
    batched = L.conv2d(t64(x), t64(w), t64(b)).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], L.conv2d(t64(x[i]), t64(w), t64(b)).data, atol=1e-12)


def test_conv_non_integral_output_names_dims():
    with pytest.raises(ShapeError, match="H=8"):
        L.conv2d(t64(np.zeros((1, 8, 9))), t64(np.zeros((1, 1, 3, 3))), stride=2, padding=0)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError, match="input channels"):
        L.conv2d(t64(np.zeros((2, 4, 4))), t64(np.zeros((1, 3, 3, 3))))


@given(st.sampled_from([1, 3, 5, 7, 9]), st.integers(1, 20), st.integers(1, 20))
def test_same_padding_preserves_dims(k, h, w):
    y = L.conv2d(Tensor(np.zeros((1, h, w))), Tensor(np.zeros((2, 1, k, k))))
    assert y.shape == (2, h, w)
    assert L.ConvSpec(1, 2, k).output_size(h, w) == (h, w)


def test_conv_spec_validation():
    with pytest.raises(ValueError):
        L.ConvSpec(1, 1, 4)
    with pytest.raises(ValueError):
        L.ConvSpec(0, 1, 3)
    assert L.ConvSpec(1, 1, 7).padding == 3


# ---------------------------------------------------------------- transposed conv


def test_tconv_zero_input_gives_bias():
    y = L.transposed_conv2d(t64(np.zeros((2, 3, 3))), t64(np.ones((2, 4, 4, 4))), t64([1.0, 2.0, 3.0, 4.0]))
    assert y.shape == (4, 6, 6)
    for c in range(4):
        assert np.all(y.data[c] == c + 1)


def test_tconv_single_pixel_scatter():
    w = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    y = L.transposed_conv2d(t64([[[2.0]]]), t64(w), t64([0.5]))
    # a 1x1 input scatters its 4x4 footprint at offset -1; the 2x2 output sees taps 1..2
    np.testing.assert_array_equal(y.data[0], 2.0 * w[0, 0, 1:3, 1:3] + 0.5)
    np.testing.assert_array_equal(y.data, tconv_oracle(np.array([[[2.0]]]), w, np.array([0.5])))


def test_tconv_matches_scatter_oracle():
    rng = np.random.default_rng(7)
    x, w, b = rng.standard_normal((3, 5, 4)), rng.standard_normal((3, 2, 4, 4)), rng.standard_normal(2)
    y = L.transposed_conv2d(t64(x), t64(w), t64(b))
    np.testing.assert_allclose(y.data, tconv_oracle(x, w, b), rtol=1e-12, atol=1e-12)


@given(st.integers(1, 64), st.integers(1, 64))
def test_tconv_doubles_dims(h, w):
    y = L.transposed_conv2d(Tensor(np.zeros((1, h, w))), Tensor(np.zeros((1, 1, 4, 4))))
    assert y.shape == (1, 2 * h, 2 * w)


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 6))
def test_conv_tconv_adjoint(seed, h, w):
    rng = np.random.default_rng(seed)
    cin, cout = 2, 3
    weight = rng.standard_normal((cin, cout, 4, 4))
    x = rng.standard_normal((cin, h, w))  # low-resolution side
    y = rng.standard_normal((cout, 2 * h, 2 * w))  # high-resolution side
    down = L.conv2d(t64(y), t64(weight), None, stride=2, padding=1).data
    up = L.transposed_conv2d(t64(x), t64(weight), None).data
    lhs, rhs = float((down * x).sum()), float((y * up).sum())
    assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs))


def test_tconv_spec_fixed():
    with pytest.raises(ValueError):
        L.TransposedConvSpec(1, 1, kernel=3)
    assert L.TransposedConvSpec(4, 2).output_size(5, 7) == (10, 14)


# ---------------------------------------------------------------- pooling and activations


def test_maxpool_examples():
    np.testing.assert_array_equal(L.maxpool2(t64([[[1.0, 2.0], [3.0, 4.0]]])).data, [[[4.0]]])
    y = L.maxpool2(t64(np.full((2, 6, 4), 3.25)))
    assert y.shape == (2, 3, 2) and np.all(y.data == 3.25)


def test_maxpool_brute_force():
    x = np.random.default_rng(5).standard_normal((3, 8, 8))
    expect = np.array([[[x[c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max() for j in range(4)] for i in range(4)]
                       for c in range(3)])
    np.testing.assert_array_equal(L.maxpool2(t64(x)).data, expect)


def test_maxpool_odd_dims_replicate_pad():
    x = np.arange(15, dtype=np.float64).reshape(1, 3, 5)
    y = L.maxpool2(t64(x)).data
    assert y.shape == (1, 2, 3)
    np.testing.assert_array_equal(y[0], [[6, 8, 9], [11, 13, 14]])


def test_maxpool_tie_routes_to_first_index():
    x = t64(np.ones((1, 2, 2)), grad=True)
    with Tape() as tape:
        loss = tensor_sum(L.maxpool2(x))
    np.testing.assert_array_equal(backward(loss, tape)[x][0], [[1, 0], [0, 0]])


def test_activation_examples():
    np.testing.assert_array_equal(L.relu(t64([-1.0, 2.0])).data, [0, 2])
    assert L.sigmoid(t64([0.0])).data[0] == 0.5
    assert L.prelu(t64([-2.0]), t64([0.25])).data[0] == -0.5
    np.testing.assert_array_equal(L.prelu(t64([3.0]), t64([0.25])).data, [3.0])


def test_prelu_one_slope_per_channel():
    x = t64(-np.ones((2, 3, 3)))
    y = L.prelu(x, t64([0.1, 0.2]))
    assert np.allclose(y.data[0], -0.1) and np.allclose(y.data[1], -0.2)
    with pytest.raises(ShapeError):
        L.prelu(x, t64([0.1, 0.2, 0.3]))


@given(st.floats(-800, 800, allow_nan=False))
def test_sigmoid_stable_and_bounded(v):
    y = L.sigmoid(t64([v])).data[0]
    assert 0.0 <= y <= 1.0 and np.isfinite(y)


# ---------------------------------------------------------------- fully connected, dropout, loss


def test_fully_connected_examples():
    x = t64([2.0, 3.0])
    np.testing.assert_array_equal(L.fully_connected(x, t64(np.eye(2)), t64([0.0, 0.0])).data, [2, 3])
    np.testing.assert_array_equal(L.fully_connected(x, t64([[1.0, 1.0]]), t64([1.0])).data, [6])


def test_fully_connected_double_loop():
    rng = np.random.default_rng(11)
    x, w, b = rng.standard_normal(7), rng.standard_normal((4, 7)), rng.standard_normal(4)
    expect = [sum(w[i, j] * x[j] for j in range(7)) + b[i] for i in range(4)]
    np.testing.assert_allclose(L.fully_connected(t64(x), t64(w), t64(b)).data, expect, rtol=1e-12)


def test_fully_connected_shape_errors():
    with pytest.raises(ShapeError):
        L.fully_connected(t64([1.0, 2.0, 3.0]), t64(np.ones((2, 2))))
    with pytest.raises(ShapeError):
        L.fully_connected(t64([1.0, 2.0]), t64(np.ones((2, 2))), t64([1.0]))


def test_dropout_modes():
    x = t64(np.arange(6.0))
    assert L.dropout(x, 0.5, train=False) is x
    assert L.dropout(x, 0.0, train=True, rng=np.random.default_rng(0)) is x
    with pytest.raises(ValueError):
        L.dropout(x, 1.0, train=True, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        L.dropout(x, 0.5, train=True)


def test_dropout_preserves_mean():
    y = L.dropout(Tensor(np.ones(100_000)), 0.5, True, np.random.default_rng(0)).data
    assert abs(y.mean() - 1.0) < 0.01
    assert set(np.unique(y)) <= {0.0, 2.0}


def test_cross_entropy_examples():
    for label in range(5):
        assert L.softmax_cross_entropy(t64(np.zeros(5)), label).item() == pytest.approx(math.log(5), abs=1e-12)
    assert L.softmax_cross_entropy(t64([0.0, 0.0, 20.0, 0.0, 0.0]), 2).item() < 1e-8
    logits = [1.0, 2.0, 3.0, 0.0, 0.0]
    oracle = -math.log(math.exp(3.0) / sum(math.exp(v) for v in logits))
    assert L.softmax_cross_entropy(t64(logits), 2).item() == pytest.approx(oracle, rel=1e-12)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    z = t64([0.3, -1.0, 2.0, 0.1, 0.0], grad=True)
    with Tape() as tape:
        loss = L.softmax_cross_entropy(z, 3)
    e = np.exp(z.data)
    expect = e / e.sum()
    expect[3] -= 1
    np.testing.assert_allclose(backward(loss, tape)[z], expect, rtol=1e-12)


@pytest.mark.parametrize("label", [-1, 5])
def test_cross_entropy_label_range(label):
    with pytest.raises(ValueError):
        L.softmax_cross_entropy(t64(np.zeros(5)), label)


@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=5, max_size=5))
def test_softmax_positive_and_normalized(vals):
    p = L.softmax(np.asarray(vals))
    assert np.all(p > 0) and abs(p.sum() - 1.0) < 1e-6


def test_layer_backward_through_projection_matches_oracle_direction():
    # d/dw <conv(x, w), g> equals the correlation of x with g; checked on a 1-channel case
    rng = np.random.default_rng(2)
    x, g = rng.standard_normal((1, 5, 5)), rng.standard_normal((1, 5, 5))
    w = t64(rng.standard_normal((1, 1, 3, 3)), grad=True)
    with Tape() as tape:
        loss = tensor_sum(mul(L.conv2d(t64(x), w, None), t64(g)))
    dw = backward(loss, tape)[w]
    xp = np.pad(x[0], 1)
    expect = np.array([[(xp[a:a + 5, b:b + 5] * g[0]).sum() for b in range(3)] for a in range(3)])
    np.testing.assert_allclose(dw[0, 0], expect, rtol=1e-12)

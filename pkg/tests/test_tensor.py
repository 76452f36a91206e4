import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cpcnn.tensor import (SGD, OptimizerState, ShapeError, Tape, Tensor, add, backward, mul, scale,
                          sgd_step, square, tensor_add, tensor_mul, tensor_scale, tensor_sum)

finite = st.floats(-100, 100, allow_nan=False, width=64)


def leaf(values, dtype=np.float64):
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=True)


def test_elementwise_examples():
    np.testing.assert_array_equal(tensor_add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4, 6])
    x = Tensor([1.5, -2.0])
    np.testing.assert_array_equal(tensor_add(x, Tensor(np.zeros(2))).data, x.data)
    np.testing.assert_array_equal(tensor_scale(Tensor([2.0, 4.0]), 0.5).data, [1, 2])
    np.testing.assert_array_equal(tensor_mul(Tensor([2.0, 3.0]), 2.0).data, [4, 6])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        add(Tensor(np.zeros(3)), Tensor(np.zeros(2)))
    assert "(3,)" in str(err.value) and "(2,)" in str(err.value)
    assert err.value.shapes == ((3,), (2,))


def test_ops_record_only_when_traced():
    a, b = Tensor([1.0]), leaf([2.0])
    with Tape() as tape:
        plain = add(a, a)
        traced = add(a, b)
    assert plain.node is None
    assert traced.node is not None
    assert [n.kind for n in tape.nodes] == ["leaf", "add"]


def test_backward_sum_and_square():
    x = leaf([1.0, 2.0, 3.0])
    with Tape() as tape:
        loss = tensor_sum(x)
    np.testing.assert_array_equal(backward(loss, tape)[x], [1, 1, 1])
    x = leaf([1.0, 2.0, 3.0])
    with Tape() as tape:
        loss = tensor_sum(mul(x, x))
    np.testing.assert_array_equal(backward(loss, tape)[x], [2, 4, 6])


def test_fan_out_accumulates():
    x = leaf([3.0])
    with Tape() as tape:
        loss = add(mul(x, x), scale(x, 4.0))
    assert backward(loss, tape)[x][0] == pytest.approx(2 * 3 + 4)


def test_untouched_parameter_gets_zero_gradient():
    x, unused = leaf([1.0, 2.0]), leaf([5.0, 6.0])
    with Tape() as tape:
        add(unused, 1.0)  # registers unused on the tape without reaching the loss
        loss = tensor_sum(x)
    grads = backward(loss, tape)
    np.testing.assert_array_equal(grads[unused], [0, 0])


def test_non_scalar_loss_rejected():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = scale(x, 2.0)
    with pytest.raises(ShapeError):
        backward(y, tape)


def test_loss_from_other_tape_rejected():
    x = leaf([1.0])
    with Tape():
        loss = tensor_sum(x)
    with pytest.raises(ValueError):
        backward(loss, Tape())


def test_backward_visits_in_reverse_order():
    x = leaf([2.0])
    with Tape() as tape:
        y = square(x)
        z = square(y)  # d/dx x^4 = 4x^3
        loss = tensor_sum(z)
    assert all(max(i for i in n.inputs if i is not None) < k
               for k, n in enumerate(tape.nodes) if n.inputs)
    assert backward(loss, tape)[x][0] == pytest.approx(32.0)


@given(arrays(np.float64, st.integers(1, 12), elements=finite),
       arrays(np.float64, st.integers(1, 12), elements=finite), st.floats(-5, 5, allow_nan=False))
def test_tape_linearity_is_exact(a_vals, b_vals, s):
    n = min(a_vals.size, b_vals.size)
    a, b = leaf(a_vals[:n]), leaf(b_vals[:n])
    with Tape() as tape:
        loss = tensor_sum(add(scale(a, s), b))
    grads = backward(loss, tape)
    assert np.array_equal(grads[a], np.full(n, s))
    assert np.array_equal(grads[b], np.ones(n))


@given(arrays(np.float32, 6, elements=st.floats(-3, 3, width=32)))
def test_forward_and_backward_deterministic(vals):
    outs = []
    for _ in range(2):
        x = leaf(vals, np.float32)
        with Tape() as tape:
            loss = tensor_sum(mul(square(x), x))
        outs.append((loss.data.tobytes(), backward(loss, tape)[x].tobytes()))
    assert outs[0] == outs[1]


def test_independent_tapes_on_threads():
    results = {}

    def work(k):
        x = leaf(np.full(4, float(k)))
        for _ in range(50):
            with Tape() as tape:
                loss = tensor_sum(square(x))
            results[k] = backward(loss, tape)[x]

    threads = [threading.Thread(target=work, args=(k,)) for k in range(1, 5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k in range(1, 5):
        np.testing.assert_array_equal(results[k], np.full(4, 2.0 * k))


# ---------------------------------------------------------------- optimizer


def test_sgd_plain_step():
    p = leaf([1.0])
    sgd_step([p], [np.array([1.0])], OptimizerState(0.1, momentum=0.0))
    assert p.data[0] == pytest.approx(0.9)


def test_sgd_zero_gradient_keeps_params():
    p = leaf([1.0])
    state = OptimizerState(0.1, momentum=0.9)
    for _ in range(2):
        sgd_step([p], [np.zeros(1)], state)
    assert p.data[0] == 1.0


def test_sgd_momentum_hand_iteration():
    # v1 = -0.1, v2 = 0.9 * -0.1 - 0.1 = -0.19, total drop 0.29
    p = leaf([1.0])
    state = OptimizerState(0.1, momentum=0.9)
    sgd_step([p], [np.ones(1)], state)
    sgd_step([p], [np.ones(1)], state)
    assert state.velocity[0][0] == pytest.approx(-0.19)
    assert 1.0 - p.data[0] == pytest.approx(0.29)


def test_sgd_shape_mismatch():
    p = leaf([1.0, 2.0])
    with pytest.raises(ShapeError):
        sgd_step([p], [np.ones(3)], OptimizerState(0.1))
    with pytest.raises(ValueError):
        sgd_step([p], [], OptimizerState(0.1))


@pytest.mark.parametrize("lr,mu", [(0.0, 0.5), (-1.0, 0.5), (0.1, 1.0), (0.1, -0.1)])
def test_optimizer_state_validation(lr, mu):
    with pytest.raises(ValueError):
        OptimizerState(lr, mu)


@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.integers(1, 5))
def test_velocity_mirrors_parameter_shapes(sizes, steps):
    params = [leaf(np.ones(s)) for s in sizes]
    opt = SGD(params, lr=0.01)
    for _ in range(steps):
        for p in params:
            p.grad = np.ones_like(p.data)
        opt.step()
    assert [v.shape for v in opt.state.velocity] == [p.shape for p in params]

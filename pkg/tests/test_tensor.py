import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqseg import tensor as tc
from seqseg.errors import DegenerateError, GraphError, ShapeError
from seqseg.tensor import Graph, Tensor


def naive_conv(x, k, b, pad):
    """Loop-nest cross-correlation used as an independent oracle."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for y in range(ho):
                for z in range(wo):
                    out[i, o, y, z] = np.sum(xp[i, :, y:y + kh, z:z + kw] * k[o]) + b[o]
    return out


def grad_of(f, *tensors):
    with Graph() as g:
        out = f(*tensors)
    tc.backward(out, g)
    return out


# ---------------------------------------------------------------- conv2d

def test_conv_all_ones_center_and_corner():
    x = Tensor(np.ones((1, 1, 3, 3)))
    k = Tensor(np.ones((1, 1, 3, 3)))
    out = tc.conv2d(x, k, Tensor(np.zeros(1)), padding=1).data[0, 0]
    assert out[1, 1] == 9.0
    assert out[0, 0] == 4.0 and out[2, 2] == 4.0


def test_conv_identity_and_zero_kernel():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 3, 5, 4)))
    eye = Tensor(np.eye(3)[:, :, None, None])
    np.testing.assert_array_equal(tc.conv2d(x, eye, Tensor(np.zeros(3))).data, x.data)
    zero = Tensor(np.zeros((4, 3, 3, 3)))
    assert not tc.conv2d(x, zero, Tensor(np.zeros(4))).data.any()


@pytest.mark.parametrize("k,pad", [(3, 1), (1, 0), (5, 2), (3, 0)])
def test_conv_matches_loop_oracle(k, pad):
    rng = np.random.default_rng(k + pad)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    got = tc.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                    Tensor(b, dtype=np.float64), padding=pad).data
    np.testing.assert_allclose(got, naive_conv(x, w, b, pad), rtol=1e-12, atol=1e-12)


def test_conv_channel_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        tc.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    assert (1, 2, 4, 4) in exc.value.shapes and (1, 3, 3, 3) in exc.value.shapes


# ---------------------------------------------------------------- elementwise / structural

def test_activation_values():
    assert tc.sigmoid(Tensor([0.0])).data[0] == 0.5
    assert tc.tanh_act(Tensor([0.0])).data[0] == 0.0
    assert tc.sigmoid(Tensor([math.log(3.0)], dtype=np.float64)).data[0] == pytest.approx(0.75, abs=1e-15)
    np.testing.assert_array_equal(tc.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_sigmoid_extreme_inputs_stay_finite():
    y = tc.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(y)) and y[0] == 0.0 and y[1] == 1.0


def test_mul_identities_and_concat_shape():
    x = Tensor(np.arange(6.0).reshape(1, 1, 2, 3))
    np.testing.assert_array_equal(tc.mul(x, Tensor(np.ones(x.shape))).data, x.data)
    assert not tc.mul(x, Tensor(np.zeros(x.shape))).data.any()
    a, b = Tensor(np.zeros((2, 2, 4, 4))), Tensor(np.ones((2, 3, 4, 4)))
    out = tc.concat_channels(a, b)
    assert out.shape == (2, 5, 4, 4)
    assert not out.data[:, :2].any() and out.data[:, 2:].all()


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        tc.add(Tensor(np.zeros((1, 2))), Tensor(np.zeros((2, 1))))
    with pytest.raises(ShapeError):
        tc.concat_channels(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 4, 5))))


def test_pool_and_upsample():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[None, None])
    assert tc.maxpool2(x).data.tolist() == [[[[4.0]]]]
    np.testing.assert_array_equal(tc.upsample2(Tensor([[[[5.0]]]])).data[0, 0], [[5, 5], [5, 5]])
    c = Tensor(np.full((1, 2, 4, 6), 3.0))
    np.testing.assert_array_equal(tc.upsample2(tc.maxpool2(c)).data, c.data)
    with pytest.raises(ShapeError):
        tc.maxpool2(Tensor(np.zeros((1, 1, 3, 4))))


def test_maxpool_tie_routes_gradient_to_first():
    x = Tensor(np.full((1, 1, 2, 2), 7.0), requires_grad=True)
    grad_of(lambda t: tc.tensor_sum(tc.maxpool2(t)), x)
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


# ---------------------------------------------------------------- loss

def _onehot(rng, n, c, h, w):
    lab = rng.integers(0, c, size=(n, h, w))
    return (np.arange(c)[None, :, None, None] == lab[:, None]).astype(np.float64)


def test_cross_entropy_uniform_logits_is_log3():
    tgt = _onehot(np.random.default_rng(0), 1, 3, 2, 2)
    loss = tc.softmax_cross_entropy(Tensor(np.zeros((1, 3, 2, 2)), dtype=np.float64), tgt)
    assert loss.item() == pytest.approx(math.log(3), abs=1e-12)


def test_cross_entropy_saturated_and_weight_scaling():
    rng = np.random.default_rng(1)
    tgt = _onehot(rng, 2, 3, 3, 3)
    loss = tc.softmax_cross_entropy(Tensor(50.0 * tgt, dtype=np.float64), tgt)
    assert loss.item() < 1e-9
    logits = Tensor(rng.normal(size=(2, 3, 3, 3)), dtype=np.float64)
    w = rng.uniform(0.1, 2, size=(2, 1, 3, 3))
    a = tc.softmax_cross_entropy(logits, tgt, w).item()
    b = tc.softmax_cross_entropy(logits, tgt, 2 * w).item()
    assert a == b


def test_cross_entropy_zero_weights_is_degenerate():
    with pytest.raises(DegenerateError):
        tc.softmax_cross_entropy(Tensor(np.zeros((1, 2, 2, 2))), np.ones((1, 2, 2, 2)) / 2, np.zeros((1, 1, 2, 2)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.1, 30.0))
def test_softmax_sums_to_one(seed, spread):
    x = np.random.default_rng(seed).normal(scale=spread, size=(2, 4, 3, 3)).astype(np.float32)
    np.testing.assert_allclose(tc.softmax(x).sum(axis=1), 1.0, atol=1e-5)


# ---------------------------------------------------------------- backward

def test_backward_examples():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3)), requires_grad=True)
    grad_of(tc.tensor_sum, x)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    x = Tensor([1.0, 2.0], requires_grad=True)
    grad_of(lambda t: tc.tensor_sum(tc.mul(t, t)), x)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    x = Tensor(np.zeros(4), requires_grad=True)
    grad_of(lambda t: tc.tensor_sum(tc.sigmoid(t)), x)
    np.testing.assert_array_equal(x.grad, np.full(4, 0.25))


def test_backward_twice_raises_until_reset():
    x = Tensor([1.0], requires_grad=True)
    with Graph() as g:
        loss = tc.tensor_sum(tc.mul(x, x))
    tc.backward(loss, g)
    with pytest.raises(GraphError):
        tc.backward(loss, g)
    g.reset()
    with g:
        loss = tc.tensor_sum(tc.mul(x, x))
    tc.backward(loss, g)


def test_tape_records_in_execution_order_and_fills_unused_leaves():
    x = Tensor([1.0, -1.0], requires_grad=True)
    unused = Tensor([3.0], requires_grad=True)
    with Graph() as g:
        y = tc.relu(tc.scale(x, 2.0))
        tc.mul(unused, unused)
        loss = tc.tensor_sum(y)
    assert g.op_names() == ["scale", "relu", "mul", "sum"]
    tc.backward(loss, g)
    np.testing.assert_array_equal(x.grad, [2.0, 0.0])
    np.testing.assert_array_equal(unused.grad, [0.0])


def test_fanout_accumulates():
    x = Tensor([3.0], requires_grad=True)
    grad_of(lambda t: tc.tensor_sum(tc.add(tc.mul(t, t), t)), x)
    assert x.grad[0] == 7.0


# ---------------------------------------------------------------- gradient checks

def test_fd_of_sum_is_exact():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), dtype=np.float64)
    assert tc.finite_difference_check(tc.tensor_sum, x, 1e-4) < 1e-9


def _random_ops(rng, dtype):
    tgt = _onehot(rng, 1, 3, 4, 4).astype(dtype)
    wts = rng.uniform(0.2, 1.0, size=(1, 1, 4, 4)).astype(dtype)
    k = Tensor(rng.normal(size=(3, 2, 3, 3)), dtype=dtype)
    b = Tensor(rng.normal(size=3), dtype=dtype)
    other = Tensor(rng.normal(size=(1, 2, 4, 4)), dtype=dtype)
    return {
        "conv2d": lambda x: tc.softmax_cross_entropy(tc.conv2d(x, k, b), tgt, wts),
        "sigmoid": lambda x: tc.tensor_sum(tc.mul(tc.sigmoid(x), other)),
        "tanh": lambda x: tc.tensor_sum(tc.mul(tc.tanh_act(x), other)),
        "relu": lambda x: tc.tensor_sum(tc.mul(tc.relu(x), other)),
        "mul": lambda x: tc.tensor_sum(tc.mul(x, other)),
        "concat": lambda x: tc.tensor_sum(tc.mul(tc.concat_channels(x, other), tc.concat_channels(other, x))),
        "maxpool": lambda x: tc.tensor_sum(tc.mul(tc.upsample2(tc.maxpool2(x)), other)),
        "slice": lambda x: tc.tensor_sum(tc.mul(tc.slice_axis(x, 0, 1), tc.slice_axis(other, 1, 2))),
    }


@pytest.mark.parametrize("op", ["conv2d", "sigmoid", "tanh", "relu", "mul", "concat", "maxpool", "slice"])
def test_gradients_float64_over_random_trials(op):
    for trial in range(20):
        rng = np.random.default_rng(1000 + trial)
        f = _random_ops(rng, np.float64)[op]
        x = Tensor(rng.normal(size=(1, 2, 4, 4)), dtype=np.float64)
        assert tc.finite_difference_check(f, x, 1e-6) < 1e-6, (op, trial)


@pytest.mark.parametrize("op", ["conv2d", "sigmoid", "tanh", "mul"])
def test_gradients_float32(op):
    for trial in range(20):
        rng = np.random.default_rng(2000 + trial)
        f = _random_ops(rng, np.float32)[op]
        x = Tensor(rng.normal(size=(1, 2, 4, 4)), dtype=np.float32)
        assert tc.finite_difference_check(f, x, 1e-3) < 1e-3, (op, trial)


def test_cross_entropy_fd_at_eps_1e4_float32():
    rng = np.random.default_rng(5)
    tgt = _onehot(rng, 1, 3, 2, 2).astype(np.float32)
    x = Tensor(rng.normal(size=(1, 3, 2, 2)), dtype=np.float32)
    assert tc.finite_difference_check(lambda t: tc.softmax_cross_entropy(t, tgt), x, 1e-4) < 1e-3


# ---------------------------------------------------------------- adam

def test_adam_zero_grad_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2, dtype=np.float32)
    tc.adam_step([p], tc.AdamState.fresh([p]), 1e-3)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([0.5]), dtype=np.float64, requires_grad=True)
    p.grad = np.array([1.0])
    tc.adam_step([p], tc.AdamState.fresh([p]), 1e-3)
    # bias-corrected: mhat = 1, vhat = 1 -> step lr / (1 + 1e-8)
    assert p.data[0] == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), abs=1e-15)


def test_adam_rejects_nonpositive_lr():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError):
        tc.adam_step([p], tc.AdamState.fresh([p]), 0.0)


def test_adam_is_deterministic():
    def run():
        rng = np.random.default_rng(3)
        p = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        st_ = tc.AdamState.fresh([p])
        for _ in range(10):
            p.grad = rng.normal(size=(4, 4)).astype(np.float32)
            tc.adam_step([p], st_, 1e-2)
        return p.data.tobytes()

    assert run() == run()


def test_step_decay_schedule():
    lrs = [tc.step_decay_lr(i, 100, 1e-3, 0.25) for i in range(100)]
    assert lrs[24] == 1e-3 and lrs[25] == pytest.approx(1e-4)


def test_check_finite():
    t = Tensor([1.0, np.nan])
    with pytest.raises(FloatingPointError):
        t.check_finite()

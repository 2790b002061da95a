import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cyclet.errors import GraphError, OptimError, ShapeError
from cyclet.nncore import (
    LrSchedule,
    OptimState,
    ParamGroup,
    Tape,
    Tensor,
    adamw_step,
    backward,
    checksum,
    forward_op,
    lr_at,
    ops,
)
from gradcases import CASES, check
from oracles import adam_first_step, central_difference, rel_err


# ---------------------------------------------------------------- Tensor


def test_tensor_shape_and_values():
    t = Tensor([[1, 2, 3], [4, 5, 6]])
    assert t.shape == (2, 3)
    assert t.size == 6
    assert t.data.dtype == np.float32
    assert t.grad is None


def test_tensor_detach_drops_graph():
    x = Tensor([1.0], requires_grad=True)
    with Tape():
        y = ops.relu(x)
    assert y.requires_grad
    d = y.detach()
    assert not d.requires_grad and d._node is None


# ---------------------------------------------------------------- forward ops


def test_relu_example():
    np.testing.assert_array_equal(forward_op("relu", Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_softmax_uniform():
    np.testing.assert_allclose(ops.softmax(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-7)


def test_identity_pointwise_conv():
    out = ops.pointwise_conv2d(Tensor([[[[5.0]]]]), Tensor([[1.0]]))
    np.testing.assert_array_equal(out.data, [[[[5.0]]]])


def test_identity_conv2d_1x1():
    out = ops.conv2d(Tensor(np.full((1, 1, 1, 1), 5.0)), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data.ravel(), [5.0])


@pytest.mark.parametrize("side,stride,expected", [(8, 1, 8), (8, 2, 4), (7, 2, 4), (5, 1, 5)])
def test_same_padding_output_side(side, stride, expected):
    x = Tensor(np.zeros((1, side, side, 2)))
    assert ops.conv2d(x, Tensor(np.zeros((3, 3, 2, 3))), stride=stride).shape == (1, expected, expected, 3)
    assert ops.depthwise_conv2d(x, Tensor(np.zeros((3, 3, 2))), stride=stride).shape == (1, expected, expected, 2)


def test_conv2d_matches_direct_loops(rng):
    x = rng.normal(size=(2, 5, 5, 3)).astype(np.float32)
    w = rng.normal(size=(3, 3, 3, 4)).astype(np.float32)
    out = ops.conv2d(Tensor(x), Tensor(w), stride=2).data
    xp = np.pad(x.astype(np.float64), ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((2, 3, 3, 4))
    for i in range(3):
        for j in range(3):
            patch = xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
            ref[:, i, j, :] = np.einsum("nhwc,hwco->no", patch, w)
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


def test_depthwise_matches_direct_loops(rng):
    x = rng.normal(size=(1, 6, 6, 2)).astype(np.float32)
    w = rng.normal(size=(3, 3, 2)).astype(np.float32)
    out = ops.depthwise_conv2d(Tensor(x), Tensor(w)).data
    xp = np.pad(x.astype(np.float64), ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 6, 6, 2))
    for i in range(6):
        for j in range(6):
            ref[:, i, j, :] = (xp[:, i:i + 3, j:j + 3, :] * w).sum(axis=(1, 2))
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


def test_max_pool_values():
    x = np.arange(16, dtype=np.float32).reshape(1, 4, 4, 1)
    np.testing.assert_array_equal(ops.max_pool2d(Tensor(x)).data.ravel(), [5, 7, 13, 15])


def test_cross_entropy_of_certain_correct_prediction_is_zero():
    loss = ops.softmax_cross_entropy(Tensor([[0.0, 200.0, 0.0]]), [1])
    assert abs(float(loss.data)) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12))
def test_softmax_rows_sum_to_one(values):
    s = ops.softmax(Tensor([values])).data
    assert abs(float(s.sum()) - 1.0) < 1e-6
    assert (s >= 0).all()


@pytest.mark.parametrize(
    "fn",
    [
        lambda: ops.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5)))),
        lambda: ops.conv2d(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((3, 3, 3, 1)))),
        lambda: ops.depthwise_conv2d(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((3, 3, 5)))),
        lambda: ops.pointwise_conv2d(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((3, 1)))),
        lambda: ops.max_pool2d(Tensor(np.zeros((1, 5, 4, 1)))),
        lambda: ops.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3]),
        lambda: forward_op("nope", Tensor([1.0])),
    ],
)
def test_shape_errors_name_the_op(fn):
    with pytest.raises(ShapeError) as e:
        fn()
    assert e.value.op


# ---------------------------------------------------------------- backward


def test_square_gradient():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = ops.sum_all(ops.mul(x, x))
    tape.backward(loss, [x])
    np.testing.assert_allclose(x.grad, [6.0])


def test_unreached_param_gets_zero_gradient():
    x = Tensor([2.0], requires_grad=True)
    p = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = ops.sum_all(x)
    tape.backward(loss, [x, p])
    np.testing.assert_array_equal(p.grad, [0.0, 0.0])


def test_frozen_leaf_receives_no_gradient():
    x = Tensor([2.0], requires_grad=True)
    w = Tensor([5.0], requires_grad=False)
    with Tape() as tape:
        loss = ops.sum_all(ops.mul(x, w))
    grads = tape.backward(loss, [x, w])
    assert w.grad is None and id(w) not in grads


def test_backward_on_unrecorded_tensor_errors():
    with pytest.raises(GraphError):
        backward(Tensor([1.0]))
    with Tape():
        x = Tensor([1.0], requires_grad=True)
        y = ops.sum_all(x)
    with pytest.raises(GraphError):
        Tape().backward(y)


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ops.relu(x)
    with pytest.raises(GraphError):
        tape.backward(y)


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients_match_finite_differences(name):
    worst = max(check(CASES[name], seed) for seed in range(20))
    assert worst < 1e-4


def test_small_mlp_gradients_per_parameter(rng):
    arrays = [rng.normal(size=(4, 5)), rng.normal(size=(5, 6)) * 0.5, rng.normal(size=(6,)),
              rng.normal(size=(6, 3)) * 0.5, rng.normal(size=(3,))]
    arrays = [a.astype(np.float32) for a in arrays]
    labels = np.array([0, 2, 1, 2])

    def net(ts):
        h = ops.relu(ops.dense(ts[0], ts[1], ts[2]))
        return ops.softmax_cross_entropy(ops.dense(h, ts[3], ts[4]), labels)

    params = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = net(params)
    tape.backward(loss, params[1:])
    for i in range(1, 5):
        def f(xi, i=i):
            ts = [Tensor(a, dtype=np.float64) for a in arrays]
            ts[i] = Tensor(xi, dtype=np.float64)
            return float(net(ts).data)

        assert rel_err(params[i].grad, central_difference(f, arrays[i])) < 1e-4


def test_gradient_accumulates_over_reuse():
    x = Tensor([1.5, -2.0], requires_grad=True)
    with Tape() as tape:
        loss = ops.sum_all(ops.add(ops.mul(x, x), x))
    tape.backward(loss, [x])
    np.testing.assert_allclose(x.grad, [4.0, -3.0])


# ---------------------------------------------------------------- optimizer


def _scalar_group(w=1.0, trainable=True):
    p = Tensor([w], requires_grad=True, name="w")
    return p, ParamGroup("head", [p], trainable=trainable)


def test_adam_first_step_matches_hand_evaluation():
    p, g = _scalar_group()
    state = OptimState(weight_decay=0.0)
    adamw_step([g], state, 0.1, grads={"w": np.array([1.0], np.float32)})
    expected = adam_first_step(1.0, 1.0, 0.1, 0.9, 0.999, 1e-8, 0.0)
    assert expected == pytest.approx(0.9, abs=1e-6)
    assert float(p.data[0]) == pytest.approx(expected, rel=1e-6)


def test_decoupled_decay_with_zero_gradient():
    p, g = _scalar_group(2.0)
    state = OptimState(weight_decay=0.01)
    adamw_step([g], state, 0.1, grads={"w": np.zeros(1, np.float32)})
    assert float(p.data[0]) == pytest.approx(2.0 - 0.1 * 0.01 * 2.0, rel=1e-7)


def test_frozen_group_bit_identical(rng):
    ps = [Tensor(rng.normal(size=(3, 2)), requires_grad=True, name=f"b{i}") for i in range(3)]
    frozen = ParamGroup("backbone", ps, trainable=False)
    q, head = _scalar_group()
    before = checksum(ps)
    state = OptimState()
    for _ in range(5):
        adamw_step([frozen, head], state, 0.01, grads={"w": np.ones(1, np.float32)})
    assert checksum(ps) == before
    assert not any(p.requires_grad for p in ps)
    assert not state.m.keys() & {p.name for p in ps}


def test_step_counter_and_moment_shapes(rng):
    p = Tensor(rng.normal(size=(4, 3)), requires_grad=True, name="m")
    g = ParamGroup("head", [p])
    state = OptimState()
    for k in range(1, 4):
        adamw_step([g], state, 1e-3, grads={"m": np.ones((4, 3), np.float32)})
        assert state.step == k
    assert state.m["m"].shape == p.shape == state.v["m"].shape


def test_missing_gradient_errors():
    _, g = _scalar_group()
    with pytest.raises(OptimError):
        adamw_step([g], OptimState(), 0.1, grads={})


def test_param_group_rejects_unknown_name():
    from cyclet.errors import ConfigError

    with pytest.raises(ConfigError):
        ParamGroup("neck", [])


# ---------------------------------------------------------------- LR schedule


@pytest.mark.parametrize("epoch,expected", [(0, 1e-3), (19, 1e-3), (20, 1e-4), (39, 1e-4), (40, 1e-5), (49, 1e-5)])
def test_lr_staircase(epoch, expected):
    assert lr_at(LrSchedule(1e-3), epoch) == pytest.approx(expected, rel=1e-12)


def test_lr_negative_epoch_errors():
    with pytest.raises(ValueError):
        lr_at(LrSchedule(), -1)


@given(st.integers(0, 500))
def test_lr_never_increases(e):
    s = LrSchedule()
    assert lr_at(s, e + 1) <= lr_at(s, e)


def test_training_steps_deterministic(rng):
    def run():
        r = np.random.default_rng(7)
        w = Tensor(r.normal(size=(5, 3)), requires_grad=True, name="w")
        g = ParamGroup("head", [w])
        x = Tensor(r.normal(size=(8, 5)))
        y = r.integers(0, 3, size=8)
        state = OptimState()
        for _ in range(10):
            with Tape() as tape:
                loss = ops.softmax_cross_entropy(ops.dense(x, w), y)
            tape.backward(loss, [w])
            adamw_step([g], state, 1e-2)
        return w.data.tobytes()

    assert run() == run()

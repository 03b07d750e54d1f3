import math

import numpy as np
import pytest

from useg.autograd import (
    AdamWState,
    CosineSchedule,
    ParameterStore,
    Tensor,
    adamw_step,
    backward,
    constant,
    cosine_lr,
    no_grad,
    ops,
    read_checkpoint,
    save_checkpoint,
    load_checkpoint,
)
from useg.errors import (
    InvalidAttr,
    MissingGrad,
    NoGraph,
    NonFinite,
    NotScalar,
    ShapeMismatch,
    StepOutOfRange,
)
from useg.gradcheck import check_function


def test_identity_kernel_conv_leaves_input_unchanged():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 5, 4))
    w = np.zeros((3, 3, 1, 1))
    w[np.arange(3), np.arange(3)] = 1.0
    y = ops.conv2d(constant(x), constant(w))
    np.testing.assert_array_equal(y.data, x)


def test_centered_delta_3x3_kernel_with_padding_is_identity():
    x = np.random.default_rng(1).normal(size=(1, 1, 4, 4))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    y = ops.conv2d(constant(x), constant(w), padding=1)
    np.testing.assert_array_equal(y.data, x)


@pytest.mark.parametrize("c", [-3.0, 0.0, 7.5])
def test_softmax_of_constant_is_uniform(c):
    y = ops.softmax(constant(np.full(4, c)))
    np.testing.assert_allclose(y.data, 0.25, rtol=0, atol=1e-15)


def test_layer_norm_of_constant_is_zero():
    y = ops.layer_norm(constant(np.full((2, 6), 3.7)))
    # the float mean of a constant row can be off by an ulp
    np.testing.assert_allclose(y.data, 0.0, atol=1e-12)


def test_product_rule():
    x = Tensor(np.array(2.0), requires_grad=True)
    y = Tensor(np.array(3.0), requires_grad=True)
    backward(x * y)
    assert x.grad == 3.0 and y.grad == 2.0


def test_backward_returns_named_leaf_grads():
    w = Tensor(np.ones(3), requires_grad=True, name="w")
    grads = backward(ops.sum_(w * w))
    np.testing.assert_array_equal(grads["w"], 2 * np.ones(3))


def test_mean_silu_linear_matches_finite_differences():
    rng = np.random.default_rng(2)
    w, x = rng.normal(size=(4, 3)), rng.normal(size=(3, 1))
    err = check_function(lambda ww, xx: ops.mean(ops.silu(ops.matmul(ww, xx))), [w, x], rng)
    assert err <= 1e-6


def test_random_composite_matches_finite_differences():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))

    def f(x, y):
        z = ops.softplus(x * y) + ops.exp(ops.sigmoid(x) - y)
        z = ops.layer_norm(z) / (ops.log(ops.exp(z) + 1.0) + 1.0)
        return ops.sum_(ops.log_softmax(z, axis=0) * ops.softmax(z, axis=1))

    assert check_function(f, [a, b], rng) <= 1e-4


def test_broadcast_gradients_sum_to_operand_shape():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((1, 3)), requires_grad=True)
    backward(ops.sum_(a * b))
    assert b.grad.shape == (1, 3)
    np.testing.assert_array_equal(b.grad, 2.0)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(NotScalar):
        backward(x * 2.0)


def test_backward_without_graph():
    with pytest.raises(NoGraph):
        backward(Tensor(np.array(1.0)))
    x = Tensor(np.array(1.0), requires_grad=True)
    with no_grad():
        y = x * 2.0
    with pytest.raises(NoGraph):
        backward(y)


def test_graph_released_after_backward():
    x = Tensor(np.array(2.0), requires_grad=True)
    y = x * x
    backward(y)
    with pytest.raises(NoGraph):
        backward(y)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_is_an_error():
    with pytest.raises(NonFinite):
        ops.log(constant(np.array([0.0, 1.0])))
    with pytest.raises(NonFinite):
        ops.exp(constant(np.array([1e4])))


def test_shape_and_attr_errors():
    with pytest.raises(ShapeMismatch):
        ops.matmul(constant(np.ones((2, 3))), constant(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch):
        ops.add(constant(np.ones(3)), constant(np.ones(4)))
    with pytest.raises(InvalidAttr):
        ops.conv2d(constant(np.ones((1, 1, 4, 4))), constant(np.ones((1, 1, 3, 3))), stride=0)
    with pytest.raises(ShapeMismatch):
        ops.conv2d(constant(np.ones((1, 2, 4, 4))), constant(np.ones((1, 1, 3, 3))))


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    y = ops.conv2d(constant(x), constant(w), constant(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(y)
    for i in range(y.shape[2]):
        for j in range(y.shape[3]):
            patch = xp[:, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
            ref[:, :, i, j] = np.einsum("bchw,ochw->bo", patch, w) + b
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_conv_transpose2d_is_adjoint_of_conv2d():
    # <conv(x), y> == <x, conv_T(y)> for the same kernel
    rng = np.random.default_rng(5)
    w = rng.normal(size=(3, 2, 2, 2))  # conv2d: O=3, C=2
    x = rng.normal(size=(1, 2, 8, 8))
    y = rng.normal(size=(1, 3, 4, 4))
    lhs = np.sum(ops.conv2d(constant(x), constant(w), stride=2).data * y)
    rhs = np.sum(x * ops.conv_transpose2d(constant(y), constant(w), stride=2).data)
    assert math.isclose(lhs, rhs, rel_tol=1e-12)


# --------------------------------------------------------------------------
# optimiser and schedule


def _store(value):
    store = ParameterStore(np.float64)
    store.add("p", np.array(value, dtype=np.float64))
    return store


def test_adamw_zero_grad_is_pure_decay():
    store = _store([1.0, -2.0, 3.0])
    state = AdamWState(lr=0.1, weight_decay=0.5)
    adamw_step(store, {"p": np.zeros(3)}, state)
    np.testing.assert_allclose(store["p"].data, np.array([1.0, -2.0, 3.0]) * (1 - 0.1 * 0.5), rtol=1e-15)


def test_adamw_first_step_is_signed_lr():
    store = _store([0.5, 0.5, 0.5])
    g = np.array([3.0, -0.2, 40.0])
    adamw_step(store, {"p": g}, AdamWState(lr=1e-2, weight_decay=0.0))
    np.testing.assert_allclose(store["p"].data, 0.5 - 1e-2 * np.sign(g), rtol=1e-6)


def _scalar_adamw(p, grads, lr, b1, b2, eps, wd):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p = p - lr * wd * p
        p = p - lr * mhat / (math.sqrt(vhat) + eps)
    return p


def test_adamw_two_steps_match_scalar_reference():
    init = [0.3, -1.2]
    gs = [np.array([0.7, -0.05]), np.array([0.7, -0.05])]
    store = _store(init)
    state = AdamWState(lr=5e-3, weight_decay=1e-2)
    for g in gs:
        adamw_step(store, {"p": g}, state)
    for i in range(2):
        ref = _scalar_adamw(init[i], [g[i] for g in gs], 5e-3, 0.9, 0.999, 1e-8, 1e-2)
        assert math.isclose(store["p"].data[i], ref, rel_tol=1e-14)


def test_adamw_validates_before_mutating():
    store = ParameterStore(np.float64)
    store.add("a", np.ones(2))
    store.add("b", np.ones(2))
    state = AdamWState(lr=0.1)
    with pytest.raises(MissingGrad):
        adamw_step(store, {"a": np.ones(2)}, state)
    with pytest.raises(ShapeMismatch):
        adamw_step(store, {"a": np.ones(2), "b": np.ones(3)}, state)
    assert state.t == 0
    np.testing.assert_array_equal(store["a"].data, 1.0)


def test_cosine_schedule_endpoints():
    sched = CosineSchedule(total_steps=100, lr_max=5e-3, lr_min=1e-4)
    assert cosine_lr(0, sched) == 5e-3
    assert math.isclose(cosine_lr(100, sched), 1e-4, rel_tol=1e-15)
    assert math.isclose(cosine_lr(50, sched), (5e-3 + 1e-4) / 2, rel_tol=1e-15)
    with pytest.raises(StepOutOfRange):
        cosine_lr(101, sched)
    with pytest.raises(StepOutOfRange):
        cosine_lr(-1, sched)


def test_default_initial_lr():
    assert cosine_lr(0, CosineSchedule(total_steps=10)) == 5e-3


# --------------------------------------------------------------------------
# parameters and checkpoints


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    store = ParameterStore(np.float32)
    store.add("enc.w", rng.normal(size=(3, 4)))
    store.add("enc.b", rng.normal(size=4))
    save_checkpoint(store, tmp_path / "ck", {"note": "x"})
    state, meta = read_checkpoint(tmp_path / "ck")
    assert meta["note"] == "x"
    for name in store.names():
        np.testing.assert_array_equal(state[name], store[name].data)
    other = ParameterStore(np.float32)
    other.add("enc.w", np.zeros((3, 4)))
    other.add("enc.b", np.zeros(4))
    load_checkpoint(other, tmp_path / "ck")
    np.testing.assert_array_equal(other["enc.w"].data, store["enc.w"].data)


def test_checkpoint_shape_mismatch(tmp_path):
    store = ParameterStore(np.float64)
    store.add("w", np.ones((2, 2)))
    save_checkpoint(store, tmp_path / "ck")
    other = ParameterStore(np.float64)
    other.add("w", np.ones((2, 3)))
    with pytest.raises(ShapeMismatch):
        load_checkpoint(other, tmp_path / "ck")


def test_scope_views():
    store = ParameterStore()
    store.add("dec.stage1.up.w", np.ones(2))
    sc = store.scope("dec").scope("stage1")
    assert sc["up.w"] is store["dec.stage1.up.w"]
    assert list(sc) == ["up.w"]

import numpy as np
import pytest

from mslab import autodiff as ad
from mslab.autodiff import AdamState, ConfigurationError, ContractError, ParamSet, ShapeError, Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_add_broadcast_gradient_sums_over_batch():
    a = leaf(np.ones((3, 2)))
    b = leaf(np.array([1.0, 2.0]))
    ad.backward(ad.sum_(a + b))
    np.testing.assert_array_equal(a.grad, np.ones((3, 2)))
    np.testing.assert_array_equal(b.grad, [3.0, 3.0])


def test_matmul_gradients_match_hand_derivation():
    a = leaf([[1.0, 2.0]])
    b = leaf([[3.0], [4.0]])
    ad.backward(ad.sum_(a @ b))
    np.testing.assert_array_equal(a.grad, [[3.0, 4.0]])
    np.testing.assert_array_equal(b.grad, [[1.0], [2.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))


def test_backward_needs_scalar():
    with pytest.raises(ContractError):
        ad.backward(leaf(np.ones(3)) * 2.0)


def test_log_is_clamped_and_gradient_vanishes_below_clamp():
    x = leaf([0.0, 1.0])
    y = ad.log(x)
    assert y.data[0] == pytest.approx(np.log(1e-12))
    ad.backward(ad.sum_(y))
    assert x.grad[0] == 0.0
    assert x.grad[1] == 1.0


def test_sigmoid_is_stable_for_large_inputs():
    y = ad.sigmoid(Tensor(np.array([-800.0, 0.0, 800.0])))
    np.testing.assert_allclose(y.data, [0.0, 0.5, 1.0])
    assert np.all(np.isfinite(y.data))


def test_softmax_rows_sum_to_one():
    y = ad.softmax(Tensor(np.random.default_rng(0).standard_normal((5, 4)) * 30))
    np.testing.assert_allclose(y.data.sum(axis=1), 1.0)


def test_log_softmax_agrees_with_log_of_softmax():
    x = np.random.default_rng(1).standard_normal((4, 3))
    np.testing.assert_allclose(ad.log_softmax(x).data, np.log(ad.softmax(x).data), atol=1e-12)


def test_pick_selects_one_entry_per_row():
    x = Tensor(np.arange(12.0).reshape(3, 4))
    np.testing.assert_array_equal(ad.pick(x, np.array([0, 3, 1])).data, [0.0, 7.0, 9.0])


def test_unreached_params_get_zero_gradient():
    ps = ParamSet(a=leaf([1.0]), b=leaf([2.0]))
    ad.backward(ad.sum_(ps["a"] * 3.0), ps)
    np.testing.assert_array_equal(ps["b"].grad, [0.0])


def test_frozen_params_receive_no_gradient():
    ps = ad.build_mlp([2, 3, 1], "relu", seed=0)
    x = leaf(np.ones((4, 2)))
    with ad.frozen(ps):
        out = ad.mlp_apply(ps, x)
        ad.backward(ad.sum_(out))
    assert all(t.grad is None for t in ps.values())
    assert x.grad is not None
    assert all(t.requires_grad for t in ps.values())


def test_build_mlp_rejects_bad_sizes():
    with pytest.raises(ConfigurationError):
        ad.build_mlp([3], "relu")
    with pytest.raises(ConfigurationError):
        ad.build_mlp([3, 0, 1], "relu")
    with pytest.raises(ConfigurationError):
        ad.build_mlp([3, 1], "swish")


def test_build_mlp_init_range_and_zero_bias():
    ps = ad.build_mlp([16, 8], "relu", seed=3)
    assert np.all(np.abs(ps["W0"].data) <= 1 / 4)
    assert np.all(ps["b0"].data == 0)


def test_mlp_apply_rejects_wrong_input_width():
    ps = ad.build_mlp([3, 2], "relu")
    with pytest.raises(ShapeError):
        ad.mlp_apply(ps, np.ones((2, 4)))


def test_forward_without_recording_returns_no_graph():
    ps = ad.build_mlp([2, 2], "tanh")
    out, graph = ad.forward(ps, np.ones((1, 2)), record=False)
    assert graph is None and not out.requires_grad


def test_adam_first_step_moves_each_weight_by_lr():
    # with bias correction, step 1 is lr * g / (|g| + eps)
    ps = ParamSet(w=leaf([1.0, -1.0]))
    ps["w"].grad = np.array([0.5, -2.0])
    state = AdamState(lr=0.1)
    ad.adam_step(state, ps)
    np.testing.assert_allclose(ps["w"].data, [0.9, -0.9], atol=1e-7)
    assert state.step == 1


def test_adam_requires_gradients():
    ps = ParamSet(w=leaf([1.0]))
    with pytest.raises(ContractError):
        ad.adam_step(AdamState(), ps)


def test_adam_minimizes_quadratic():
    ps = ParamSet(w=leaf([3.0, -2.0]))
    state = AdamState(lr=0.05, beta1=0.9, beta2=0.999)
    for _ in range(2000):
        ps.zero_grad()
        ad.backward(ad.sum_(ps["w"] * ps["w"]), ps)
        ad.adam_step(state, ps)
    np.testing.assert_allclose(ps["w"].data, 0.0, atol=1e-2)


def test_finite_difference_check_flags_wrong_gradient():
    ps = ParamSet(x=leaf([0.3, 0.7]))

    def broken():
        out = ad.exp(ps["x"])
        # sabotage: backward claims zero slope
        out._backward = lambda g: ps["x"]._accumulate(np.zeros_like(g))
        return ad.sum_(out)

    assert not ad.finite_difference_check(ps, broken).ok


def test_finite_difference_check_passes_on_mlp():
    ps = ad.build_mlp([3, 4, 2], "tanh", seed=5)
    x = np.random.default_rng(5).standard_normal((6, 3))
    rep = ad.finite_difference_check(ps, lambda: ad.mean(ad.mlp_apply(ps, x)))
    assert rep.ok, rep.per_param


def test_relative_error_floor():
    assert ad.relative_error(np.array([0.0]), np.array([1e-9])) == pytest.approx(1e-3)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pedca import numerics as nx
from pedca.numerics import (
    AdamState,
    DimensionError,
    NumericalError,
    Tensor,
    TrainingError,
    adam_step,
    finite_difference_gradient,
    relative_error,
)


def check_gradients(build, arrays, tol=1e-4):
    """Compare backward() against central differences for a scalar-valued graph."""
    params = [nx.parameter(a.copy()) for a in arrays]
    loss = build(*params)
    loss.backward()
    analytic = [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]

    def f():
        with nx.no_grad():
            return build(*params).item()

    numeric = finite_difference_gradient(f, params)
    for a, g in zip(analytic, numeric):
        assert relative_error(a, g) <= tol


def weighted(out):
    # fixed random projection so every output coordinate influences the loss
    w = np.random.default_rng(99).normal(size=out.shape)
    return (out * w).sum()


shapes = st.tuples(st.integers(1, 8), st.integers(1, 8))


# -- matmul -------------------------------------------------------------------


def test_matmul_identity():
    m = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(nx.matmul(Tensor(np.eye(3)), Tensor(m)).data, m)


def test_matmul_hand_expansion():
    out = nx.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_zero_annihilates():
    out = nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.ones((3, 4))))
    assert np.array_equal(out.data, np.zeros((2, 4)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_matmul_gradient(m, k, n, seed):
    rng = np.random.default_rng(seed)
    check_gradients(lambda a, b: weighted(a @ b), [rng.normal(size=(m, k)), rng.normal(size=(k, n))])


def test_batched_matmul_gradient_against_shared_weight():
    rng = np.random.default_rng(0)
    check_gradients(lambda a, b: weighted(a @ b), [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))])


# -- softmax ------------------------------------------------------------------


def test_softmax_uniform():
    assert np.allclose(nx.softmax(Tensor([0.0, 0.0, 0.0])).data, 1.0 / 3.0, atol=1e-15)


def test_softmax_large_logits_do_not_overflow():
    out = nx.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_log_ratio():
    out = nx.softmax(Tensor(np.log([1.0, 2.0, 3.0]))).data
    assert np.allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


def test_softmax_axis_out_of_range():
    with pytest.raises(DimensionError):
        nx.softmax(Tensor(np.ones((2, 2))), axis=2)


@settings(max_examples=50, deadline=None)
@given(shapes, st.integers(0, 1), st.floats(0.1, 50.0), st.integers(0, 2**31 - 1))
def test_softmax_sums_to_one(shape, axis, scale, seed):
    x = np.random.default_rng(seed).normal(scale=scale, size=shape)
    out = nx.softmax(Tensor(x), axis=axis).data
    assert np.all(out >= 0)
    assert np.max(np.abs(out.sum(axis=axis) - 1.0)) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(shapes, st.integers(0, 2**31 - 1))
def test_softmax_gradient(shape, seed):
    x = np.random.default_rng(seed).normal(size=shape)
    check_gradients(lambda a: weighted(nx.softmax(a, axis=-1)), [x])


# -- layer norm ---------------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    out = nx.layer_norm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_already_standardized():
    out = nx.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-15)


def test_layer_norm_zero_gain_gives_bias():
    bias = np.array([0.5, -2.0, 1.0])
    x = np.random.default_rng(0).normal(size=(4, 3))
    out = nx.layer_norm(Tensor(x), Tensor(np.zeros(3)), Tensor(bias))
    assert np.array_equal(out.data, np.broadcast_to(bias, (4, 3)))


def test_layer_norm_rejects_wrong_affine_shape():
    with pytest.raises(DimensionError):
        nx.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))


@settings(max_examples=25, deadline=None)
@given(st.tuples(st.integers(1, 8), st.integers(2, 8)), st.integers(0, 2**31 - 1))
def test_layer_norm_gradient(shape, seed):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=shape), rng.normal(size=shape[1]), rng.normal(size=shape[1])]
    check_gradients(lambda x, g, b: weighted(nx.layer_norm(x, g, b)), arrays)


# -- elementwise primitives ----------------------------------------------------


UNARY = {
    "exp": nx.exp,
    "sin": nx.sin,
    "tanh": nx.tanh,
    "sigmoid": nx.sigmoid,
    "gelu": nx.gelu,
    "neg": nx.neg,
    "square": lambda a: nx.power(a, 2.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=15, deadline=None)
@given(shape=shapes, seed=st.integers(0, 2**31 - 1))
def test_unary_gradient(name, shape, seed):
    x = np.random.default_rng(seed).normal(size=shape)
    check_gradients(lambda a: weighted(UNARY[name](a)), [x])


@settings(max_examples=15, deadline=None)
@given(shapes, st.integers(0, 2**31 - 1))
def test_log_and_reciprocal_gradient(shape, seed):
    x = np.random.default_rng(seed).uniform(0.5, 3.0, size=shape)
    check_gradients(lambda a: weighted(nx.log(a)), [x])
    check_gradients(lambda a: weighted(nx.power(a, -1.0)), [x])


@settings(max_examples=15, deadline=None)
@given(shapes, st.integers(0, 2**31 - 1))
def test_relu_and_clip_gradient_away_from_kinks(shape, seed):
    rng = np.random.default_rng(seed)
    x = rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 2.0, size=shape)
    check_gradients(lambda a: weighted(nx.relu(a)), [x])
    check_gradients(lambda a: weighted(nx.clip(a, -0.05, 0.05) + a * 0.0), [x])


@settings(max_examples=25, deadline=None)
@given(shapes, st.integers(0, 2**31 - 1))
def test_broadcast_binary_gradients(shape, seed):
    rng = np.random.default_rng(seed)
    x, row = rng.normal(size=shape), rng.normal(size=(1, shape[1]))
    check_gradients(lambda a, b: weighted(a * b + b), [x, row])
    check_gradients(lambda a, b: weighted(a - b), [x, rng.normal(size=shape[1])])
    check_gradients(lambda a, b: weighted(a / (b * b + 1.0)), [x, row])


@settings(max_examples=20, deadline=None)
@given(st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)), st.integers(0, 2**31 - 1))
def test_shape_op_gradients(shape, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)
    check_gradients(lambda a: weighted(nx.transpose(a, (2, 0, 1))), [x])
    check_gradients(lambda a: weighted(nx.swap_last(a)), [x])
    check_gradients(lambda a: weighted(a.reshape(shape[0], -1)), [x])
    check_gradients(lambda a: weighted(a.sum(axis=1)), [x])
    check_gradients(lambda a: weighted(a.mean(axis=(0, 2), keepdims=True)), [x])
    check_gradients(lambda a: weighted(a[:, 0, :]), [x])
    check_gradients(lambda a: weighted(a[np.array([0, 0, shape[0] - 1])]), [x])


def test_concat_stack_embedding_gradients():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
    check_gradients(lambda x, y: weighted(nx.concat([x, y], axis=0)), [a, b])
    check_gradients(lambda x, y: weighted(nx.stack([x, y[:2]], axis=1)), [a, b])
    ids = np.array([[0, 3, 3], [1, 0, 2]])
    check_gradients(lambda t: weighted(nx.embedding(t, ids)), [b])


def test_embedding_rejects_out_of_range_ids():
    with pytest.raises(IndexError):
        nx.embedding(nx.parameter(np.ones((3, 2))), np.array([3]))


# -- backward semantics ----------------------------------------------------------


def test_backward_linear_and_quadratic():
    w = nx.parameter(np.array([1.0, -2.0, 3.0]))
    w.sum().backward()
    assert np.array_equal(w.grad, np.ones(3))
    w.zero_grad()
    (w * w).sum().backward()
    assert np.array_equal(w.grad, 2.0 * w.data)


def test_backward_requires_scalar():
    w = nx.parameter(np.ones(3))
    with pytest.raises(ValueError):
        (w * 2.0).backward()


def test_shared_tensor_gradients_accumulate_over_paths():
    x = nx.parameter(np.array([0.3, -1.2]))
    h = nx.tanh(x)
    loss = (h * h).sum() + nx.sin(h).sum()
    loss.backward()
    t = np.tanh(x.data)
    expected = (2 * t + np.cos(t)) * (1 - t * t)
    assert np.allclose(x.grad, expected, atol=1e-14)


def test_repeated_backward_adds_into_grad():
    w = nx.parameter(np.array([2.0]))
    (w * 3.0).sum().backward()
    (w * 3.0).sum().backward()
    assert w.grad[0] == 6.0


def test_no_grad_records_nothing():
    w = nx.parameter(np.ones(2))
    with nx.no_grad():
        out = w * 2.0
    assert not out.requires_grad
    assert nx.grad_enabled()


def test_non_finite_results_raise():
    with pytest.raises(NumericalError):
        nx.exp(Tensor([1000.0]))
    with pytest.raises(NumericalError):
        nx.log(Tensor([0.0]))


def test_operations_are_deterministic():
    rng = np.random.default_rng(5)
    x, w = rng.normal(size=(4, 6)), rng.normal(size=(6, 6))

    def run():
        a, b = nx.parameter(x), nx.parameter(w)
        out = nx.softmax(nx.gelu(a @ b), axis=-1).sum()
        out.backward()
        return out.data.tobytes(), a.grad.tobytes(), b.grad.tobytes()

    assert run() == run()


# -- finite differences ------------------------------------------------------------


def test_finite_difference_square():
    theta = nx.parameter(np.array([3.0]))
    (g,) = finite_difference_gradient(lambda: float(theta.data[0] ** 2), [theta], eps=1e-4)
    assert abs(g[0] - 6.0) <= 1e-6


def test_finite_difference_constant():
    theta = nx.parameter(np.ones((2, 2)))
    (g,) = finite_difference_gradient(lambda: 7.0, [theta])
    assert np.array_equal(g, np.zeros((2, 2)))


def test_finite_difference_sine():
    theta = nx.parameter(np.linspace(-2, 2, 7))
    (g,) = finite_difference_gradient(lambda: float(np.sin(theta.data).sum()), [theta])
    assert np.allclose(g, np.cos(theta.data), atol=1e-6)


def test_finite_difference_restores_parameters():
    theta = nx.parameter(np.array([1.5, -0.5]))
    before = theta.data.copy()
    finite_difference_gradient(lambda: float((theta.data**3).sum()), [theta])
    assert np.array_equal(theta.data, before)


def test_finite_difference_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        finite_difference_gradient(lambda: 0.0, [nx.parameter(np.ones(1))], eps=0.0)


def test_relative_error_scale():
    assert relative_error(np.array([0.5]), np.array([0.25])) == 0.25
    assert relative_error(np.array([100.0]), np.array([101.0])) == pytest.approx(1 / 101)


# -- Adam ---------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_parameters():
    p = {"w": nx.parameter(np.array([1.0, -2.0]))}
    state = AdamState(p)
    adam_step(p, {"w": np.zeros(2)}, state)
    assert np.array_equal(p["w"].data, [1.0, -2.0])
    assert state.step_count == 1


def test_adam_first_step_is_signed_lr():
    p = {"w": nx.parameter(np.zeros(3))}
    g = np.array([0.3, -4.0, 1e-3])
    adam_step(p, {"w": g}, AdamState(p), lr=1e-3)
    # bias-corrected m/sqrt(v) equals sign(g) up to eps
    assert np.allclose(p["w"].data, -1e-3 * np.sign(g), rtol=1e-4)


def test_adam_moves_monotonically_against_constant_gradient():
    p = {"w": nx.parameter(np.array([0.0]))}
    state = AdamState(p)
    positions = []
    for _ in range(3):
        adam_step(p, {"w": np.array([2.0])}, state)
        positions.append(p["w"].data[0])
    assert positions[0] < 0 and positions[1] < positions[0] and positions[2] < positions[1]
    assert state.step_count == 3


def test_adam_moment_shapes_match_parameters():
    p = {"a": nx.parameter(np.ones((2, 3))), "b": nx.parameter(np.ones(4))}
    state = AdamState(p)
    assert all(state.first_moment[k].shape == p[k].shape == state.second_moment[k].shape for k in p)


def test_adam_rejects_non_finite_gradient_by_name():
    p = {"layer.w": nx.parameter(np.ones(2))}
    with pytest.raises(TrainingError, match="layer.w"):
        adam_step(p, {"layer.w": np.array([1.0, math.nan])}, AdamState(p))


def test_adam_rejects_shape_mismatch():
    p = {"w": nx.parameter(np.ones(2))}
    with pytest.raises(DimensionError):
        adam_step(p, {"w": np.ones(3)}, AdamState(p))


def test_adam_missing_gradient_counts_as_zero():
    p = {"w": nx.parameter(np.ones(2)), "v": nx.parameter(np.ones(2))}
    adam_step(p, {"w": np.ones(2)}, AdamState(p))
    assert np.array_equal(p["v"].data, np.ones(2))

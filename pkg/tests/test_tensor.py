import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hdmnet import tensor as T
from hdmnet.gradcheck import finite_diff_check, numerical_gradient
from hdmnet.tensor import GraphError, NonFiniteError, ShapeError, Tensor


def leaf(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


# -- matmul ----------------------------------------------------------------

def test_matmul_identity():
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ b).data, b.data)


def test_matmul_basis_selection():
    out = Tensor([[1.0, 0.0]]) @ Tensor([[5.0], [7.0]])
    assert out.data.tolist() == [[5.0]]


def test_matmul_gradient(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    w = rng.normal(size=(3, 2))
    err = finite_diff_check(lambda: T.sum(T.mul(a @ b, Tensor(w))), [a, b])
    assert err < 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


# -- softmax ---------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_hand_value():
    np.testing.assert_allclose(T.softmax(Tensor([np.log(2.0), 0.0])).data, [2 / 3, 1 / 3], atol=1e-15)


def test_softmax_bad_axis():
    with pytest.raises(ShapeError):
        T.softmax(Tensor(np.ones((2, 2))), axis=2)


@settings(max_examples=60, deadline=None)
@given(
    x=hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                 elements=st.floats(-50, 50)),
    shift=st.floats(-100, 100),
)
def test_softmax_normalised_and_shift_invariant(x, shift):
    axis = x.ndim - 1
    p = T.softmax(Tensor(x), axis=axis).data
    assert np.all(np.abs(p.sum(axis=axis) - 1.0) < 1e-9)
    q = T.softmax(Tensor(x + shift), axis=axis).data
    np.testing.assert_allclose(p, q, atol=1e-9)


def test_softmax_gradient(rng):
    x = leaf(rng, 3, 5, low=-3, high=3)
    w = rng.normal(size=(3, 5))
    assert finite_diff_check(lambda: T.sum(T.mul(T.softmax(x, axis=0), Tensor(w))), [x]) < 1e-5


# -- bilinear resize -------------------------------------------------------

def test_resize_identity_is_exact(rng):
    x = Tensor(rng.normal(size=(2, 4, 4)))
    np.testing.assert_array_equal(T.bilinear_resize(x, 4, 4).data, x.data)


@pytest.mark.parametrize("size", [(1, 1), (3, 5), (8, 8), (13, 2)])
def test_resize_constant_is_exact(size):
    x = Tensor(np.full((2, 4, 6), 3.5))
    assert np.all(T.bilinear_resize(x, *size).data == 3.5)


def test_resize_half_pixel_convention():
    # 2 -> 4 along one axis: sources at -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
    x = Tensor(np.array([[[0.0, 4.0]]]))
    np.testing.assert_allclose(T.bilinear_resize(x, 1, 4).data[0, 0], [0.0, 1.0, 3.0, 4.0])


def test_resize_gradient(rng):
    x = leaf(rng, 2, 8, 8)
    w = rng.normal(size=(2, 4, 4))
    assert finite_diff_check(lambda: T.sum(T.mul(T.bilinear_resize(x, 4, 4), Tensor(w))), [x]) < 1e-5


def test_resize_upsample_gradient(rng):
    x = leaf(rng, 1, 3, 2)
    w = rng.normal(size=(1, 7, 5))
    assert finite_diff_check(lambda: T.sum(T.mul(T.bilinear_resize(x, 7, 5), Tensor(w))), [x]) < 1e-6


def test_resize_rejects_nonpositive_target():
    with pytest.raises(ShapeError):
        T.bilinear_resize(Tensor(np.ones((1, 2, 2))), 0, 2)


# -- elementwise -----------------------------------------------------------

def test_relu():
    assert T.elementwise("relu", Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_hadamard_with_ones(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(T.elementwise("hadamard", x, Tensor(np.ones((3, 4)))).data, x.data)


def test_hadamard_needs_equal_shapes():
    with pytest.raises(ShapeError):
        T.hadamard(Tensor(np.ones((2, 3))), Tensor(np.ones((3,))))


def test_concat_channel_shape():
    out = T.elementwise("concat-channel", Tensor(np.ones((5, 3, 2))), Tensor(np.zeros((1, 3, 2))))
    assert out.shape == (6, 3, 2)


def test_concat_channel_rejects_spatial_mismatch():
    with pytest.raises(ShapeError):
        T.concat_channel(Tensor(np.ones((5, 3, 2))), Tensor(np.zeros((1, 2, 2))))


def test_unknown_elementwise():
    with pytest.raises(ValueError):
        T.elementwise("gelu", Tensor([1.0]))


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (4, 5), elements=st.floats(-10, 10)),
       hnp.arrays(np.bool_, (4, 5)))
def test_hadamard_zero_where_mask_zero(x, m):
    out = T.hadamard(Tensor(x), Tensor(m.astype(float))).data
    assert np.all(out[~m] == 0)


# -- linear ----------------------------------------------------------------

def test_linear_identity(rng):
    x = Tensor(rng.normal(size=(5, 3)))
    out = T.linear(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x.data)


def test_linear_zero_input_gives_bias():
    out = T.linear(Tensor(np.zeros((4, 3))), Tensor(np.ones((2, 3))), Tensor([0.5, -2.0]))
    np.testing.assert_array_equal(out.data, np.tile([0.5, -2.0], (4, 1)))


def test_linear_gradient_all_arguments(rng):
    x, w, b = leaf(rng, 5, 3), leaf(rng, 2, 3), leaf(rng, 2)
    proj = rng.normal(size=(5, 2))
    assert finite_diff_check(lambda: T.sum(T.mul(T.linear(x, w, b), Tensor(proj))), [x, w, b]) < 1e-6


def test_linear_shape_errors():
    with pytest.raises(ShapeError):
        T.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))
    with pytest.raises(ShapeError):
        T.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


# -- other differentiable ops -----------------------------------------------

@pytest.mark.parametrize(
    "build",
    [
        lambda x: T.l2_normalize_rows(x),
        lambda x: T.standardize(x),
        lambda x: T.log_softmax(x, axis=1),
        lambda x: T.exp(x),
        lambda x: T.log(T.exp(x)),
        lambda x: T.div(x, T.exp(x)),
        lambda x: T.avg_pool2(T.reshape(x, (1, 4, 6))),
        lambda x: T.flatten_sites(T.reshape(x, (2, 3, 4))),
        lambda x: T.sum(x, axis=0, keepdims=True) * x,
        lambda x: T.mean(x, axis=1) + 0.0,
        lambda x: x[1:3, ::2],
        lambda x: T.concat([x, T.relu(x)], axis=1),
    ],
    ids=["l2norm", "standardize", "log_softmax", "exp", "log", "div", "avg_pool2",
         "flatten_sites", "sum_broadcast", "mean", "index", "concat"],
)
def test_op_gradients(rng, build):
    x = leaf(rng, 4, 6)
    probe = {}

    def f():
        y = build(x)
        if "w" not in probe:
            probe["w"] = np.random.default_rng(9).normal(size=y.shape)
        return T.sum(T.mul(y, Tensor(probe["w"])))

    assert finite_diff_check(f, [x]) < 1e-5


def test_l2_normalize_zero_row_stays_zero():
    x = Tensor(np.array([[3.0, 4.0], [0.0, 0.0]]), requires_grad=True)
    y = T.l2_normalize_rows(x)
    np.testing.assert_array_equal(y.data, [[0.6, 0.8], [0.0, 0.0]])
    T.sum(y).backward()
    np.testing.assert_array_equal(x.grad[1], [0.0, 0.0])


def test_flatten_is_view_and_round_trips(rng):
    x = Tensor(rng.normal(size=(3, 2, 5)))
    rows = T.flatten_sites(x)
    assert np.shares_memory(rows.data, x.data)
    assert rows.data[7].tolist() == x.data[:, 1, 2].tolist()
    back = T.unflatten_sites(rows, 2, 5)
    np.testing.assert_array_equal(back.data, x.data)


# -- backward semantics ----------------------------------------------------

def test_backward_sum_gives_ones(rng):
    x = leaf(rng, 3, 2)
    T.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_backward_half_square(rng):
    x = leaf(rng, 4)
    T.scale(T.sum(T.mul(x, x)), 0.5).backward()
    np.testing.assert_allclose(x.grad, x.data, rtol=1e-15)


def test_backward_twice_is_error(rng):
    x = leaf(rng, 2)
    loss = T.sum(x)
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_backward_non_scalar_is_error(rng):
    with pytest.raises(GraphError):
        leaf(rng, 2).backward()


def test_backward_detached_is_error():
    with pytest.raises(GraphError):
        T.sum(Tensor([1.0, 2.0])).backward()


def test_detach_blocks_gradient(rng):
    x = leaf(rng, 3)
    loss = T.sum(T.mul(x, x.detach()))
    loss.backward()
    np.testing.assert_allclose(x.grad, x.data)


def test_shared_subexpression_accumulates(rng):
    x = leaf(rng, 3)
    y = T.exp(x)
    T.sum(y + y).backward()
    np.testing.assert_allclose(x.grad, 2 * np.exp(x.data))


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        T.log(Tensor([0.0, 1.0]))
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_graph_order_is_topological(rng):
    from hdmnet.tensor import _topological

    x = leaf(rng, 2)
    loss = T.sum(T.exp(x) * T.relu(x))
    order = _topological(loss)
    pos = {id(t): i for i, t in enumerate(order)}
    for node in order:
        for p in node.parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]


# -- oracle self-tests -----------------------------------------------------

def test_finite_diff_exact_for_linear(rng):
    p = leaf(rng, 5)
    w = rng.normal(size=5)
    assert finite_diff_check(lambda: T.sum(T.mul(p, Tensor(w))), [p]) < 1e-9


def test_finite_diff_constant_function(rng):
    p = leaf(rng, 3)
    assert np.all(numerical_gradient(lambda: 4.0, p) == 0)
    err = finite_diff_check(lambda: T.sum(T.scale(p, 0.0)), [p])
    assert err == 0.0


def test_finite_diff_reports_nan_as_failure(rng):
    p = leaf(rng, 2)
    state = {"calls": 0}

    def f():
        state["calls"] += 1
        out = T.sum(p)
        if state["calls"] > 1:
            return float("nan")
        return out

    assert finite_diff_check(f, [p]) == float("inf")

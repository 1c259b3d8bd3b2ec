import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from dualrc import tensor as T
from dualrc.errors import ConfigError, GraphError, ParameterError, ShapeError
from dualrc.tensor import ParamStore, Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


@pytest.mark.parametrize("c_in,c_out,h,w,k,pad", [(1, 1, 4, 5, 3, 0), (2, 3, 5, 5, 3, 1),
                                                  (3, 2, 6, 4, 1, 0), (2, 2, 4, 4, 5, 2)])
def test_conv2d_matches_loops(c_in, c_out, h, w, k, pad):
    g = rng(c_in * 10 + k)
    x = g.normal(size=(c_in, h, w))
    kern = g.normal(size=(c_out, c_in, k, k))
    got = T.conv2d(x, kern, padding=pad).data
    assert np.allclose(got, oracles.conv2d(x, kern, pad), rtol=1e-12, atol=1e-12)


def test_conv2d_delta_kernel_is_identity():
    x = rng().normal(size=(1, 5, 6))
    assert np.array_equal(T.conv2d(x, T.delta_kernel(1, 1, 3, 2), padding=1).data, x)


def test_conv2d_box_example():
    # all-ones 3x3 on a 3x3 ones image with padding 1: corner 4, edge 6, centre 9
    out = T.conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), padding=1).data[0]
    assert out.tolist() == [[4, 6, 4], [6, 9, 6], [4, 6, 4]]


@pytest.mark.parametrize("dims,k,c_in,c_out", [((3, 2, 3, 2), 3, 1, 2), ((2, 3, 2, 2), 3, 2, 1),
                                               ((3, 3, 2, 2), 1, 2, 2)])
def test_conv4d_matches_loops(dims, k, c_in, c_out):
    g = rng(k + c_in)
    x = g.normal(size=(c_in,) + dims)
    kern = g.normal(size=(c_out, c_in) + (k,) * 4)
    assert np.allclose(T.conv4d(x, kern).data, oracles.conv4d(x, kern), rtol=1e-12, atol=1e-12)


def test_conv4d_rejects_even_kernels_and_other_padding():
    x = np.zeros((1, 3, 3, 3, 3))
    with pytest.raises(ConfigError):
        T.conv4d(x, np.zeros((1, 1, 2, 2, 2, 2)))
    with pytest.raises(ConfigError):
        T.conv4d(x, np.zeros((1, 1, 3, 3, 3, 3)), padding=0)


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        T.conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(ShapeError):
        T.conv2d(np.zeros((1, 2, 2)), np.zeros((1, 1, 3, 3)))


def test_conv4d_delta_is_identity():
    x = rng().normal(size=(1, 3, 2, 3, 2))
    assert np.array_equal(T.conv4d(x, T.delta_kernel(1, 1, 3, 4)).data, x)


def _grad_of(fn, *arrays):
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    T.backward(fn(*ts))
    return [t.grad for t in ts]


@pytest.mark.parametrize("name,fn,shapes", [
    ("conv2d", lambda x, w: T.frobenius(T.conv2d(x, w, padding=1)), [(2, 4, 5), (3, 2, 3, 3)]),
    ("conv4d", lambda x, w: T.frobenius(T.conv4d(x, w)), [(2, 3, 2, 2, 3), (1, 2, 3, 3, 3, 3)]),
    ("pool_upsample", lambda x: T.sum_(T.mul(T.upsample_nearest(T.avg_pool2d(x, 2), 2), x)),
     [(2, 4, 6)]),
    ("normalize", lambda x: T.sum_(T.mul(T.l2_normalize_channels(x), np.arange(24.0).reshape(4, 2, 3))),
     [(4, 2, 3)]),
    ("softmax", lambda x: T.frobenius(T.sub(T.softmax(x), 0.1)), [(3, 5)]),
    ("matmul_div", lambda a, b: T.sum_(T.div(T.matmul(a, b), T.add(T.mul(b, b), 1.0))),
     [(4, 4), (4, 4)]),
    ("amax", lambda x: T.sum_(T.mul(T.amax(x, (0, 1), keepdims=True), x)), [(3, 2, 4)]),
    ("exp_broadcast", lambda a, b: T.sum_(T.exp(T.add(a, b))), [(3, 4), (1, 4)]),
    ("gather_stack", lambda x: T.frobenius(T.stack([T.getitem(x, np.array([0, 2, 2])), x[1:4]])),
     [(5, 3)]),
])
def test_backward_matches_finite_differences(name, fn, shapes):
    g = rng(len(name))
    arrays = [g.normal(size=s) for s in shapes]
    analytic = _grad_of(fn, *arrays)
    for a, ga in zip(arrays, analytic):
        numeric = oracles.numeric_grad(lambda: fn(*[Tensor(b) for b in arrays]).item(), a)
        assert oracles.rel_err(ga, numeric) < 1e-6, name


def test_relu_and_frobenius_subgradients():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    T.backward(T.sum_(T.relu(x)))
    assert x.grad.tolist() == [0.0, 0.0, 1.0]
    z = Tensor(np.zeros(3), requires_grad=True)
    T.backward(T.frobenius(z))
    assert z.grad.tolist() == [0.0, 0.0, 0.0]


def test_amax_gradient_goes_to_first_tie():
    x = Tensor(np.array([[1.0, 3.0, 3.0]]), requires_grad=True)
    T.backward(T.sum_(T.amax(x, (1,))))
    assert x.grad.tolist() == [[0.0, 1.0, 0.0]]


def test_leaf_gradients_accumulate():
    x = Tensor(np.array([2.0]), requires_grad=True)
    T.backward(T.sum_(T.mul(x, x)))
    T.backward(T.sum_(T.mul(x, 3.0)))
    assert x.grad.tolist() == [7.0]


def test_backward_errors():
    with pytest.raises(ShapeError):
        T.backward(Tensor(np.ones(2), requires_grad=True))
    with pytest.raises(GraphError):
        T.backward(T.sum_(Tensor(np.ones(2))))
    store = ParamStore()
    store.add("w", np.ones(2))
    other = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(GraphError):
        T.backward(T.sum_(other), store)


def test_param_store():
    store = ParamStore()
    store.add("a", np.ones(2))
    store.add("b", np.ones(1), trainable=False)
    assert [n for n, _ in store.trainable()] == ["a"]
    with pytest.raises(ParameterError):
        store.add("a", np.zeros(1))
    with pytest.raises(ParameterError):
        store["missing"]
    assert list(store.to_arrays()) == ["a", "b"]


def test_item_requires_scalar():
    assert Tensor(np.array([[2.5]])).item() == 2.5
    with pytest.raises(ShapeError):
        Tensor(np.ones(2)).item()


def test_softmax_rows_sum_to_one():
    s = T.softmax(rng().normal(size=(4, 7)) * 50).data
    assert np.allclose(s.sum(axis=1), 1.0)


def test_normalize_zero_vector_stays_zero():
    f = np.zeros((3, 1, 2))
    f[:, 0, 1] = [3.0, 4.0, 0.0]
    out = T.l2_normalize_channels(f).data
    assert out[:, 0, 0].tolist() == [0, 0, 0]
    assert np.allclose(out[:, 0, 1], [0.6, 0.8, 0.0])


def test_allocation_tracker():
    with T.track_allocations() as tr:
        a = Tensor(np.zeros(100))
        b = Tensor(np.zeros(50))
        T.record("score_map", 7)
        T.record("score_map", 3)
        del a
    assert tr.total_bytes == 1200
    assert tr.peak_bytes == 1200
    assert tr.live_bytes == 400
    assert tr.max_elements == {"score_map": 7}
    del b


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(1, 4),
       st.integers(0, 2 ** 31 - 1))
def test_upsample_is_block_constant(c, h, w, r, seed):
    x = np.random.default_rng(seed).normal(size=(c, h, w))
    up = T.upsample_nearest(x, r).data
    assert up.shape == (c, h * r, w * r)
    blocks = up.reshape(c, h, r, w, r)
    assert np.array_equal(blocks, np.broadcast_to(x[:, :, None, :, None], blocks.shape))


def test_uniform_init_bounds():
    w = T.uniform_init(rng(), (4, 3, 3, 3))
    assert np.abs(w).max() <= np.sqrt(6 / 27)

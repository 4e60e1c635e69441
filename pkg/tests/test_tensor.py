import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from featstyle import tensor as T
from featstyle.errors import ContractError, DimensionError, DomainError, ParameterError
from featstyle.gradcheck import check, numeric_grad
from featstyle.tensor import Tensor

RTOL_GRAD = 1e-5


def t(x, grad=False):
    return Tensor(x, requires_grad=grad)


# -- elementwise ---------------------------------------------------------------
def test_add_and_relu_values():
    np.testing.assert_array_equal(T.add(t([1, 2]), t([3, 4])).data, [4, 6])
    np.testing.assert_array_equal(T.relu(t([-1, 0, 2])).data, [0, 0, 2])


def test_grad_of_sum_of_product():
    a, b = t([1.0, 2.0], True), t([5.0, 7.0])
    T.backward((a * b).sum())
    # central differences, step 1e-6
    probe = np.array([1.0, 2.0])
    num = numeric_grad(lambda: float((probe * b.data).sum()), probe)
    np.testing.assert_allclose(a.grad, [5, 7], rtol=1e-9)
    np.testing.assert_allclose(num, [5, 7], rtol=1e-8)


def test_channel_vector_broadcasts_over_batch_and_space():
    x = np.arange(2 * 3 * 2 * 2, dtype=float).reshape(2, 3, 2, 2)
    v = np.array([10.0, 20.0, 30.0])
    out = (t(x) + t(v)).data
    np.testing.assert_array_equal(out, x + v[None, :, None, None])
    err = check(lambda a, b: ((a * b) ** 2).sum(), [x, v])
    assert err < RTOL_GRAD


def test_shape_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        t([1.0, 2.0]) + t([1.0, 2.0, 3.0])
    with pytest.raises(DimensionError):
        t(np.zeros((1, 3, 2, 2))) + t(np.zeros(4))


def test_log_of_non_positive_is_domain_error():
    with pytest.raises(DomainError):
        T.log(t([1.0, 0.0]))
    with pytest.raises(DomainError):
        T.div(t([1.0]), t([0.0]))


@pytest.mark.parametrize(
    "fn",
    [
        lambda a, b: (a + b).sum(),
        lambda a, b: (a - b * a).sum(),
        lambda a, b: (a / (T.exp(b) + 1.0)).sum(),
        lambda a, b: T.log(T.exp(a) + T.exp(b)).sum(),
        lambda a, b: (T.relu(a) * b).sum(),
        lambda a, b: (-(a**2) + T.sqrt(b * b + 1.0)).sum(),
        lambda a, b: T.clamp_min(a * b, 0.1).sum(),
    ],
)
def test_elementwise_grads(fn):
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.standard_normal((2, 3, 4))
        assert check(fn, [a, b]) < RTOL_GRAD


# -- matmul --------------------------------------------------------------------
def test_matmul_values():
    np.testing.assert_array_equal((t([[1, 0], [0, 1]]) @ t([[3], [4]])).data, [[3], [4]])
    np.testing.assert_array_equal((t([[1, 2]]) @ t([[3], [4]])).data, [[11]])


def test_matmul_grad():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    assert check(lambda a, b: ((a @ b) ** 2).sum(), [a, b]) < 1e-6


def test_matmul_inner_mismatch():
    with pytest.raises(DimensionError):
        t(np.zeros((2, 3))) @ t(np.zeros((2, 3)))


# -- conv2d --------------------------------------------------------------------
def _direct_conv(x, w, stride, pad):
    """Loop-level cross-correlation oracle."""
    b, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((b, cout, ho, wo))
    for n in range(b):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[n, o, i, j] = (patch * w[o]).sum()
    return out


def test_conv_of_ones():
    out = T.conv2d(t(np.ones((1, 1, 3, 3))), t(np.ones((1, 1, 3, 3))))
    np.testing.assert_array_equal(out.data, [[[[9.0]]]])


def test_conv_delta_impulse_recovers_flipped_kernel():
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1.0
    w = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
    out = T.conv2d(t(x), t(w), pad=1).data[0, 0]
    np.testing.assert_array_equal(out[1:4, 1:4], w[0, 0, ::-1, ::-1])
    np.testing.assert_array_equal(out, _direct_conv(x, w, 1, 1)[0, 0])


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_direct_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x, w = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3))
    bias = rng.standard_normal(4)
    got = T.conv2d(t(x), t(w), t(bias), stride=stride, pad=pad).data
    np.testing.assert_allclose(got, _direct_conv(x, w, stride, pad) + bias[None, :, None, None], atol=1e-12)


def test_conv_grad():
    rng = np.random.default_rng(2)
    x, w, b = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    assert check(lambda x, w, b: (T.conv2d(x, w, b, 1, 1) ** 2).sum(), [x, w, b]) < RTOL_GRAD
    assert check(lambda x, w: (T.conv2d(x, w, None, 2, 1) ** 2).sum(), [x, w]) < RTOL_GRAD


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(t(np.zeros((1, 2, 4, 4))), t(np.zeros((1, 3, 3, 3))))


# -- pooling / upsampling ----------------------------------------------------------
def test_avg_pool_values_and_adjoint():
    x = t([[[[1.0, 3.0], [5.0, 7.0]]]], True)
    out = T.avg_pool2(x)
    np.testing.assert_array_equal(out.data, [[[[4.0]]]])
    T.backward(out.sum())
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 0.25))
    assert check(lambda x: (T.avg_pool2(x) ** 2).sum(), [np.random.default_rng(3).standard_normal((2, 2, 4, 6))]) < RTOL_GRAD


def test_avg_pool_of_constant():
    np.testing.assert_array_equal(T.avg_pool2(t(np.full((2, 3, 4, 4), 2.5))).data, np.full((2, 3, 2, 2), 2.5))


def test_avg_pool_odd_extent_names_constraint():
    with pytest.raises(DimensionError, match="stylization"):
        T.avg_pool2(t(np.zeros((1, 1, 3, 4))))


def test_max_pool_values_and_grad():
    x = t([[[[1.0, 3.0], [5.0, 7.0]]]], True)
    out = T.max_pool2(x)
    np.testing.assert_array_equal(out.data, [[[[7.0]]]])
    T.backward(out.sum())
    np.testing.assert_array_equal(x.grad, [[[[0, 0], [0, 1.0]]]])
    assert check(lambda x: (T.max_pool2(x) ** 2).sum(), [np.random.default_rng(4).standard_normal((2, 2, 4, 4))]) < RTOL_GRAD


def test_upsample_values_and_adjoint():
    np.testing.assert_array_equal(T.upsample_nearest2(t([[[[4.0]]]])).data, np.full((1, 1, 2, 2), 4.0))
    x = t([[[[0.0]]]], True)
    T.backward((T.upsample_nearest2(x) * t([[[[1.0, 2.0], [3.0, 4.0]]]])).sum())
    np.testing.assert_array_equal(x.grad, [[[[10.0]]]])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-1e6, 1e6)))
def test_pool_of_upsample_is_identity(x):
    np.testing.assert_array_equal(T.avg_pool2(T.upsample_nearest2(t(x))).data, x)


# -- reductions ------------------------------------------------------------------
def test_reduce_stats_population_variance():
    mu, var = T.reduce_stats(t([2.0, 2.0, 4.0, 4.0]), 0)
    assert mu.data.item() == 3.0 and var.data.item() == 1.0
    _, var = T.reduce_stats(t([1.5] * 5), 0)
    assert var.data.item() == 0.0


def test_reduce_stats_grads():
    x = np.random.default_rng(5).standard_normal((3, 2, 2, 2))
    assert check(lambda x: T.reduce_stats(x, (0, 2, 3))[0].sum(), [x]) < 1e-6
    assert check(lambda x: (T.reduce_stats(x, (0, 2, 3))[1] ** 2).sum(), [x]) < RTOL_GRAD


def test_reduce_stats_empty_set():
    with pytest.raises(DomainError):
        T.reduce_stats(t(np.zeros((0, 3))), 0)


# -- softmax -----------------------------------------------------------------------
def test_softmax_values():
    np.testing.assert_allclose(T.softmax(t([[0.0, 0.0]])).data, [[0.5, 0.5]])
    np.testing.assert_allclose(T.softmax(t([[np.log(2.0), 0.0]])).data, [[2 / 3, 1 / 3]], rtol=1e-14)
    p1 = T.softmax(t([[1.0, 0.0]]), 1.0).data[0]
    p05 = T.softmax(t([[1.0, 0.0]]), 0.5).data[0]
    np.testing.assert_allclose(p1[0] / p1[1], np.e, rtol=1e-14)
    np.testing.assert_allclose(p05[0] / p05[1], np.e**2, rtol=1e-14)


def test_softmax_rejects_bad_temperature():
    for tau in (0.0, -1.0):
        with pytest.raises(ParameterError):
            T.softmax(t([[1.0, 2.0]]), tau)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 6)), elements=st.floats(-30, 30)),
       st.floats(0.05, 2.0))
def test_softmax_rows_sum_to_one(logits, tau):
    p = T.softmax(t(logits), tau).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p >= 0) and np.all(p <= 1)


def test_softmax_and_log_softmax_grads():
    rng = np.random.default_rng(6)
    for tau in (1.0, 0.5, 0.15):
        x, w = rng.standard_normal((2, 4, 5))
        assert check(lambda x, w: (T.softmax(x, tau) * w).sum(), [x, w]) < RTOL_GRAD
        assert check(lambda x, w: (T.log_softmax(x, tau) * w).sum(), [x, w]) < RTOL_GRAD


def test_masked_logsumexp():
    x = np.random.default_rng(7).standard_normal((4, 4))
    mask = ~np.eye(4, dtype=bool)
    got = T.masked_logsumexp(t(x), mask).data
    want = [np.log(np.exp(x[i][mask[i]]).sum()) for i in range(4)]
    np.testing.assert_allclose(got, want, rtol=1e-13)
    assert check(lambda x: (T.masked_logsumexp(x, mask) ** 2).sum(), [x]) < RTOL_GRAD
    with pytest.raises(ContractError):
        T.masked_logsumexp(t(x), np.zeros((4, 4), dtype=bool))


# -- stop-gradient and backward ------------------------------------------------------
def test_stop_gradient():
    a, b = t([1.0, 2.0], True), t([3.0, 5.0], True)
    sg = T.stop_gradient(a)
    np.testing.assert_array_equal(sg.data, [1.0, 2.0])
    T.backward((sg * b).sum())
    assert a.grad is None
    np.testing.assert_array_equal(b.grad, [1.0, 2.0])
    # finite differences on b only
    err = check(lambda a, b: (T.stop_gradient(a) * b).sum(), [[1.0, 2.0], [3.0, 5.0]], wrt=[1])
    assert err < 1e-8


def test_backward_simple_cases():
    a = t([1.0, 2.0, 3.0], True)
    T.backward(a.sum())
    np.testing.assert_array_equal(a.grad, [1.0, 1.0, 1.0])
    a.zero_grad()
    T.backward((a * a).sum())
    np.testing.assert_array_equal(a.grad, [2.0, 4.0, 6.0])


def test_backward_accumulates_without_reset():
    a = t([1.0, 2.0], True)
    T.backward((a * 3.0).sum())
    T.backward((a * 3.0).sum())
    np.testing.assert_array_equal(a.grad, [6.0, 6.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(DimensionError):
        T.backward(t([1.0, 2.0], True) * 2.0)


def test_reused_tensor_accumulates_once_per_use():
    a = t([2.0], True)
    b = a * a + a  # a used three times
    T.backward(b.sum())
    np.testing.assert_array_equal(a.grad, [5.0])


def test_composite_graph_grad_and_replay_determinism():
    rng = np.random.default_rng(8)
    x, w = rng.standard_normal((2, 2, 4, 4)), rng.standard_normal((3, 2, 3, 3))

    def f(x, w):
        h = T.relu(T.conv2d(x, w, pad=1))
        mu, var = T.reduce_stats(h, (0, 2, 3))
        return (T.log_softmax(T.avg_pool2(h).mean(axis=(2, 3))) * 0.3).sum() + (var * mu).sum()

    assert check(f, [x, w]) < RTOL_GRAD
    grads = []
    for _ in range(2):
        xt, wt = t(x, True), t(w, True)
        T.backward(f(xt, wt))
        grads.append((xt.grad.copy(), wt.grad.copy()))
    for g1, g2 in zip(*grads):
        np.testing.assert_array_equal(g1, g2)


def test_tape_is_topological():
    a = t([1.0], True)
    b = a * 2.0
    c = b + a
    order = T.tape(c)
    pos = {id(n): i for i, n in enumerate(order)}
    assert pos[id(a)] < pos[id(b)] < pos[id(c)]


def test_rank_limit():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((1, 1, 1, 1, 1)))


@pytest.mark.parametrize("seed", range(20))
def test_random_ops_pass_finite_difference(seed):
    rng = np.random.default_rng(100 + seed)
    x = rng.standard_normal((2, 2, 4, 4))
    w = rng.standard_normal((2, 2, 3, 3))
    v = rng.standard_normal(2)
    fn = [
        lambda x, w, v: (T.conv2d(x, w, v, 1, 1) ** 2).sum(),
        lambda x, w, v: (T.upsample_nearest2(T.avg_pool2(x)) * x).sum(),
        lambda x, w, v: (T.exp(x * 0.3) * v).sum(),
        lambda x, w, v: (T.softmax(x.reshape(16, 4), 0.7) * v.sum()).sum() + (T.log_softmax(x.reshape(16, 4)) ** 2).sum(),
    ][seed % 4]
    assert check(fn, [x, w, v]) < RTOL_GRAD

import numpy as np
import numpy.testing as npt
import pytest

from gbst import tensor as T
from gbst.errors import ConfigError, NonFiniteError, ShapeError, TapeError
from gbst.tensor import Parameter, Tensor, backward, no_grad, reset_tape


def fd_grad(f, arr, h=1e-6):
    """Central-difference gradient of a scalar function of one array."""
    g = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def check_op_grad(build_loss, params, rtol=1e-6):
    """Analytic grads from one backward pass vs finite differences."""
    reset_tape()
    loss = build_loss()
    backward(loss)
    for p in params:
        analytic = p.grad.copy()

        def value():
            with no_grad():
                return float(build_loss().data)

        numeric = fd_grad(value, p.data)
        denom = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
        assert np.abs(numeric - analytic).max() / denom < rtol, p.name
    reset_tape()


@pytest.fixture(autouse=True)
def clean_tape():
    reset_tape()
    yield
    reset_tape()


# --- matmul -----------------------------------------------------------------


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    npt.assert_array_equal(T.matmul(a, b).data, b.data)


def test_matmul_orthogonal_rows():
    a = Tensor([[1.0, 0.0]])
    b = Tensor([[0.0], [5.0]])
    npt.assert_array_equal(T.matmul(a, b).data, [[0.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradient_vs_fd():
    rng = np.random.default_rng(0)
    a = Parameter("a", rng.normal(size=(3, 4)))
    b = Parameter("b", rng.normal(size=(4, 2)))
    check_op_grad(lambda: T.sum_all(T.matmul(a.tensor, b.tensor)), [a, b])


# --- conv1d_same ------------------------------------------------------------


def test_conv_identity_kernel():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(6, 3)))
    filters = Tensor(np.eye(3)[None, :, :])  # k=1 identity channel map
    out = T.conv1d_same(x, filters, Tensor(np.zeros(3)))
    npt.assert_allclose(out.data, x.data, atol=0)


def test_conv_constant_interior():
    # averaging kernel summing to 1 per output channel leaves a constant
    # signal unchanged away from the zero-padded edges
    d, k = 2, 3
    x = Tensor(np.full((7, d), 2.5))
    filters = np.zeros((k, d, d))
    for t in range(k):
        filters[t] = np.eye(d) / k
    out = T.conv1d_same(x, Tensor(filters), Tensor(np.zeros(d)))
    npt.assert_allclose(out.data[1:-1], 2.5, atol=1e-15)


def test_conv_matches_triple_loop():
    rng = np.random.default_rng(2)
    n, d, k = 9, 3, 5
    x = rng.normal(size=(n, d))
    filters = rng.normal(size=(k, d, d))
    bias = rng.normal(size=d)
    out = T.conv1d_same(Tensor(x), Tensor(filters), Tensor(bias))
    ref = np.zeros((n, d))
    half = (k - 1) // 2
    for i in range(n):
        for j in range(d):
            acc = bias[j]
            for t in range(k):
                src = i + t - half
                if 0 <= src < n:
                    for c in range(d):
                        acc += x[src, c] * filters[t, c, j]
            ref[i, j] = acc
    assert np.abs(out.data - ref).max() < 1e-12


def test_conv_even_kernel_rejected():
    with pytest.raises(ConfigError):
        T.conv1d_same(Tensor(np.zeros((4, 2))), Tensor(np.zeros((2, 2, 2))), Tensor(np.zeros(2)))


def test_conv_gradient_vs_fd():
    rng = np.random.default_rng(3)
    x = Parameter("x", rng.normal(size=(6, 2)))
    f = Parameter("f", rng.normal(size=(3, 2, 2)))
    b = Parameter("b", rng.normal(size=2))
    w = Tensor(rng.normal(size=(6, 2)))

    def loss():
        return T.sum_all(T.mul(T.conv1d_same(x.tensor, f.tensor, b.tensor), w))

    check_op_grad(loss, [x, f, b])


# --- mean_pool_1d -----------------------------------------------------------


def test_pool_output_length():
    out = T.mean_pool_1d(Tensor(np.arange(16.0).reshape(8, 2)), 2, 2)
    assert out.shape == (4, 2)


def test_pool_constant():
    out = T.mean_pool_1d(Tensor(np.full((9, 3), 1.7)), 3, 3)
    npt.assert_allclose(out.data, 1.7, atol=0)


def test_pool_matches_loop():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(10, 2))
    out = T.mean_pool_1d(Tensor(x), 3, 3)
    ref = np.zeros((3, 2))  # remainder row dropped (VALID)
    for j in range(3):
        ref[j] = x[3 * j : 3 * j + 3].mean(axis=0)
    assert np.abs(out.data - ref).max() < 1e-15


def test_pool_short_input_rejected():
    with pytest.raises(ShapeError):
        T.mean_pool_1d(Tensor(np.zeros((2, 1))), 3, 3)


def test_pool_gradient_overlapping_windows():
    rng = np.random.default_rng(5)
    x = Parameter("x", rng.normal(size=(7, 2)))
    w = Tensor(rng.normal(size=(3, 2)))
    check_op_grad(lambda: T.sum_all(T.mul(T.mean_pool_1d(x.tensor, 3, 2), w)), [x])


# --- softmax ----------------------------------------------------------------


def test_softmax_uniform():
    out = T.softmax_last_axis(Tensor([[0.0, 0.0, 0.0, 0.0]]))
    npt.assert_allclose(out.data, 0.25, atol=1e-15)


def test_softmax_extreme_logits_stable():
    out = T.softmax_last_axis(Tensor([[1000.0, 0.0]]))
    assert np.isfinite(out.data).all()
    npt.assert_allclose(out.data, [[1.0, 0.0]], atol=1e-300)


def test_softmax_gradient_vs_fd():
    rng = np.random.default_rng(6)
    x = Parameter("x", rng.normal(size=(1, 4)))
    w = Tensor(rng.normal(size=(1, 4)))
    check_op_grad(lambda: T.sum_all(T.mul(T.softmax_last_axis(x.tensor), w)), [x])


# --- repeat_upsample --------------------------------------------------------


def test_repeat_factor_one_identity():
    x = Tensor([[1.0], [2.0]])
    npt.assert_array_equal(T.repeat_upsample(x, 1).data, x.data)


def test_repeat_definition():
    out = T.repeat_upsample(Tensor([[1.0], [2.0]]), 3)
    npt.assert_array_equal(out.data, [[1.0], [1.0], [1.0], [2.0], [2.0], [2.0]])


def test_repeat_backward_sums_groups():
    p = Parameter("p", np.array([[1.0], [2.0]]))
    reset_tape()
    backward(T.sum_all(T.repeat_upsample(p.tensor, 3)))
    npt.assert_array_equal(p.grad, [[3.0], [3.0]])


def test_repeat_bad_factor():
    with pytest.raises(ConfigError):
        T.repeat_upsample(Tensor([[1.0]]), 0)


# --- backward / tape --------------------------------------------------------


def test_backward_sum_gives_ones():
    p = Parameter("p", np.arange(6.0).reshape(2, 3))
    reset_tape()
    backward(T.sum_all(p.tensor))
    npt.assert_array_equal(p.grad, np.ones((2, 3)))


def test_backward_zero_product_gives_zeros():
    p = Parameter("p", np.arange(4.0).reshape(2, 2))
    reset_tape()
    backward(T.sum_all(T.mul(p.tensor, 0.0)))
    npt.assert_array_equal(p.grad, np.zeros((2, 2)))


def test_backward_requires_scalar():
    p = Parameter("p", np.ones((2, 2)))
    reset_tape()
    out = T.mul(p.tensor, 2.0)
    with pytest.raises(ShapeError):
        backward(out)


def test_backward_twice_raises():
    p = Parameter("p", np.ones(3))
    reset_tape()
    loss = T.sum_all(p.tensor)
    backward(loss)
    with pytest.raises(TapeError):
        backward(loss)


def test_backward_empty_tape_raises():
    reset_tape()
    with pytest.raises(TapeError):
        backward(Tensor(np.asarray(0.0), requires_grad=True))


def test_multipath_accumulation():
    # y used twice: chain rule sums over paths
    p = Parameter("p", np.array([3.0]))
    reset_tape()
    y = T.mul(p.tensor, 2.0)
    backward(T.sum_all(T.add(y, y)))
    npt.assert_array_equal(p.grad, [4.0])


def test_frozen_parameter_gets_zero_grad():
    p = Parameter("p", np.ones(3), frozen=True)
    q = Parameter("q", np.ones(3))
    reset_tape()
    backward(T.sum_all(T.add(p.tensor, q.tensor)))
    npt.assert_array_equal(p.grad, np.zeros(3))
    npt.assert_array_equal(q.grad, np.ones(3))


def test_forward_nan_raises():
    with np.errstate(invalid="ignore"):
        with pytest.raises(NonFiniteError):
            T.mul(Tensor([np.inf]), 0.0)


def test_determinism_bit_identical():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(5, 4))
    b = rng.normal(size=(4, 3))

    def run():
        reset_tape()
        pa, pb = Parameter("a", a.copy()), Parameter("b", b.copy())
        loss = T.sum_all(T.gelu(T.matmul(pa.tensor, pb.tensor)))
        backward(loss)
        return float(loss.data), pa.grad.copy(), pb.grad.copy()

    l1, ga1, gb1 = run()
    l2, ga2, gb2 = run()
    assert l1 == l2
    assert (ga1 == ga2).all() and (gb1 == gb2).all()


# --- plumbing ops -----------------------------------------------------------


def test_add_row_broadcast_gradient():
    rng = np.random.default_rng(8)
    x = Parameter("x", rng.normal(size=(5, 3)))
    b = Parameter("b", rng.normal(size=3))
    w = Tensor(rng.normal(size=(5, 3)))
    check_op_grad(lambda: T.sum_all(T.mul(T.add(x.tensor, b.tensor), w)), [x, b])


def test_mul_column_broadcast_gradient():
    rng = np.random.default_rng(9)
    x = Parameter("x", rng.normal(size=(5, 3)))
    c = Parameter("c", rng.normal(size=(5, 1)))
    check_op_grad(lambda: T.sum_all(T.mul(x.tensor, c.tensor)), [x, c])


def test_pad_slice_roundtrip_and_grads():
    rng = np.random.default_rng(10)
    x = Parameter("x", rng.normal(size=(4, 2)))
    padded = T.pad_rows(x.tensor, 1, 2)
    assert padded.shape == (7, 2)
    npt.assert_array_equal(padded.data[0], 0.0)
    back = T.slice_rows(padded, 1, 5)
    npt.assert_array_equal(back.data, x.data)
    w = Tensor(rng.normal(size=(4, 2)))
    check_op_grad(lambda: T.sum_all(T.mul(T.slice_rows(T.pad_rows(x.tensor, 1, 2), 1, 5), w)), [x])


def test_slice_cols_and_concat_inverse():
    rng = np.random.default_rng(11)
    x = Parameter("x", rng.normal(size=(3, 6)))
    parts = [T.slice_cols(x.tensor, i, i + 2) for i in (0, 2, 4)]
    merged = T.concat_last_axis(parts)
    npt.assert_array_equal(merged.data, x.data)
    w = Tensor(rng.normal(size=(3, 6)))
    check_op_grad(
        lambda: T.sum_all(
            T.mul(T.concat_last_axis([T.slice_cols(x.tensor, 0, 2), T.slice_cols(x.tensor, 2, 6)]), w)
        ),
        [x],
    )


def test_transpose_gradient():
    rng = np.random.default_rng(12)
    x = Parameter("x", rng.normal(size=(3, 5)))
    w = Tensor(rng.normal(size=(5, 3)))
    check_op_grad(lambda: T.sum_all(T.mul(T.transpose_2d(x.tensor), w)), [x])


def test_embedding_gather_counts():
    table = Parameter("table", np.random.default_rng(13).normal(size=(4, 3)))
    ids = [2, 0, 2, 2]
    reset_tape()
    backward(T.sum_all(T.embedding_gather(table.tensor, ids)))
    expected = np.zeros((4, 3))
    expected[2] = 3.0
    expected[0] = 1.0
    npt.assert_array_equal(table.grad, expected)


def test_embedding_gather_lookup_and_range():
    table = Tensor(np.eye(4))
    out = T.embedding_gather(table, [2])
    npt.assert_array_equal(out.data, [[0.0, 0.0, 1.0, 0.0]])
    with pytest.raises(ValueError):
        T.embedding_gather(table, [4])


def test_layer_norm_gradient_vs_fd():
    rng = np.random.default_rng(14)
    x = Parameter("x", rng.normal(size=(4, 6)))
    g = Parameter("g", rng.normal(size=6))
    b = Parameter("b", rng.normal(size=6))
    w = Tensor(rng.normal(size=(4, 6)))
    check_op_grad(
        lambda: T.sum_all(T.mul(T.layer_norm(x.tensor, g.tensor, b.tensor), w)), [x, g, b], rtol=1e-5
    )


def test_gelu_gradient_vs_fd():
    rng = np.random.default_rng(15)
    x = Parameter("x", rng.normal(size=(5, 3)))
    check_op_grad(lambda: T.sum_all(T.gelu(x.tensor)), [x])


def test_cross_entropy_values_and_gradient():
    rng = np.random.default_rng(16)
    logits = Parameter("logits", rng.normal(size=(4, 7)))
    ids = [1, 0, 6, 3]
    reset_tape()
    loss = T.cross_entropy_with_logits(logits.tensor, ids)
    # direct logsumexp oracle
    z = logits.data
    ref = np.mean(
        [np.log(np.exp(z[i] - z[i].max()).sum()) + z[i].max() - z[i, t] for i, t in enumerate(ids)]
    )
    npt.assert_allclose(float(loss.data), ref, rtol=1e-12)
    check_op_grad(lambda: T.cross_entropy_with_logits(logits.tensor, ids), [logits])


def test_no_grad_suppresses_recording():
    p = Parameter("p", np.ones(3))
    reset_tape()
    with no_grad():
        out = T.mul(p.tensor, 2.0)
    assert not out.requires_grad
    assert len(T.active_tape()) == 0

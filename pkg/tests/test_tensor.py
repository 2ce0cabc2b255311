import numpy as np
import pytest

from scamkit import tensor as T
from scamkit.gradcheck import check_gradient
from scamkit.tensor import (
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    add,
    concat,
    conv2d,
    conv3d,
    deconv2d,
    elementwise,
    gap,
    matmul,
    minmax_normalize,
    mul,
    relu,
    reshape,
    sgd_step,
    sigmoid,
    softmax_rows,
    sum_all,
    upsample_bilinear,
)

RTOL = 1e-4


def test_sigmoid_symmetry():
    assert sigmoid(Tensor(0.0)).item() == pytest.approx(0.5, abs=1e-15)


def test_sigmoid_strictly_open_interval():
    out = sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
    assert np.all(out > 0.0) and np.all(out < 1.0)


def test_relu_definition():
    out = relu(Tensor([-1.0, 2.0])).data
    assert np.array_equal(out, [0.0, 2.0])


def test_mul_forward_and_backward():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0], requires_grad=True)
    with Tape() as tape:
        out = mul(a, b)
        assert np.array_equal(out.data, [3.0, 8.0])
        tape.backward(sum_all(out))
    # d(sum(a*b))/da = b, checked against the finite-difference oracle
    assert np.allclose(a.grad, [3.0, 4.0])
    err = check_gradient(lambda xs: sum_all(mul(xs[0], xs[1])), [a.data, b.data])
    assert err <= RTOL


def test_elementwise_dispatch():
    a = Tensor([1.0, -1.0])
    b = Tensor([2.0, 2.0])
    assert np.array_equal(elementwise("add", a, b).data, [3.0, 1.0])
    assert np.array_equal(elementwise("mul", a, b).data, [2.0, -2.0])
    assert np.array_equal(elementwise("relu", a).data, [1.0, 0.0])
    with pytest.raises(ValueError):
        elementwise("pow", a, b)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    assert "(2, 3)" in str(exc.value) and "(3, 2)" in str(exc.value)


def test_channel_vector_broadcast():
    x = Tensor(np.ones((2, 4, 4)), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        out = add(x, b)
        tape.backward(sum_all(out))
    assert np.allclose(out.data[0], 2.0) and np.allclose(out.data[1], 3.0)
    assert np.allclose(b.grad, [16.0, 16.0])


def test_nan_rejected():
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])


def test_matmul_identity():
    m = np.arange(6, dtype=float).reshape(2, 3)
    out = matmul(Tensor(np.eye(2)), Tensor(m))
    assert np.array_equal(out.data, m)


def test_matmul_arithmetic():
    out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.shape == (1, 1) and out.item() == 11.0


def test_matmul_inner_dim_error():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradient_vs_fd():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((4, 5))
    b = rng.standard_normal((5, 3))
    err = check_gradient(lambda xs: sum_all(sigmoid(matmul(xs[0], xs[1]))), [a, b])
    assert err <= RTOL


def test_conv2d_1x1_scaling():
    x = Tensor(np.array([[[1.0, 3.0]]]))
    k = Tensor(np.array([[[[2.0]]]]))
    out = conv2d(x, k)
    assert np.array_equal(out.data, [[[2.0, 6.0]]])


def _conv2d_oracle(x, k, stride, pad):
    # direct-summation reference implementation
    ci, h, w = x.shape
    co, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride : i * stride + kh, j * stride : j * stride + kw]
                out[o, i, j] = np.sum(patch * k[o])
    return out


def test_conv2d_neighborhood_count():
    x = np.zeros((1, 3, 3))
    x[0, 1, 1] = 1.0
    k = np.ones((1, 1, 3, 3))
    out = conv2d(Tensor(x), Tensor(k), stride=1, pad=1)
    expected = _conv2d_oracle(x, k, 1, 1)
    assert np.array_equal(out.data, expected)
    assert np.array_equal(out.data[0], np.ones((3, 3)))


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_oracle(stride, pad):
    rng = np.random.default_rng(11)
    x = rng.standard_normal((3, 7, 6))
    k = rng.standard_normal((4, 3, 3, 3))
    out = conv2d(Tensor(x), Tensor(k), stride=stride, pad=pad)
    assert np.allclose(out.data, _conv2d_oracle(x, k, stride, pad), atol=1e-12)


def test_conv2d_nonpositive_output_error():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


def test_conv_deconv_adjoint_identity():
    rng = np.random.default_rng(7)
    for stride, pad in [(1, 0), (2, 1), (2, 0)]:
        x = rng.standard_normal((1, 4, 4))
        k = rng.standard_normal((2, 1, 3, 3))
        y = conv2d(Tensor(x), Tensor(k), stride=stride, pad=pad)
        g = rng.standard_normal(y.shape)
        back = deconv2d(Tensor(g), Tensor(k), stride=stride, pad=pad, out_hw=(4, 4))
        lhs = float(np.sum(y.data * g))
        rhs = float(np.sum(x * back.data))
        assert abs(lhs - rhs) <= 1e-10


def test_deconv2d_shape_formula():
    y = Tensor(np.ones((3, 4, 4)))
    k = Tensor(np.ones((3, 5, 2, 2)))
    out = deconv2d(y, k, stride=2)
    assert out.shape == (5, 8, 8)


def test_conv2d_gradient_vs_fd():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    err = check_gradient(
        lambda xs: sum_all(sigmoid(conv2d(xs[0], xs[1], stride=2, pad=1))), [x, k]
    )
    assert err <= RTOL


def test_deconv2d_gradient_vs_fd():
    rng = np.random.default_rng(6)
    y = rng.standard_normal((2, 3, 3))
    k = rng.standard_normal((2, 3, 2, 2))
    err = check_gradient(
        lambda xs: sum_all(sigmoid(deconv2d(xs[0], xs[1], stride=2))), [y, k]
    )
    assert err <= RTOL


def test_conv3d_collapses_time_and_matches_2d():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 3, 6, 6))
    k = rng.standard_normal((4, 2, 3, 3, 3))
    out = conv3d(Tensor(x), Tensor(k), stride=1, pad=1)
    assert out.shape == (4, 1, 6, 6)
    # time-collapsed kernel on the channel-folded input must agree
    x2 = x.reshape(6, 6, 6)
    k2 = k.reshape(4, 6, 3, 3)
    ref = conv2d(Tensor(x2), Tensor(k2), stride=1, pad=1)
    assert np.allclose(out.data[:, 0], ref.data, atol=1e-12)


def test_conv3d_gradient_vs_fd():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((1, 3, 4, 4))
    k = rng.standard_normal((2, 1, 3, 2, 2))
    err = check_gradient(
        lambda xs: sum_all(sigmoid(conv3d(xs[0], xs[1], stride=2))), [x, k]
    )
    assert err <= RTOL


def test_gap_constant_channel():
    x = np.full((1, 2, 2), 5.0)
    assert gap(Tensor(x)).data[0] == 5.0


def test_gap_arithmetic():
    x = np.array([[[0.0, 2.0], [4.0, 6.0]]])
    assert gap(Tensor(x)).data[0] == 3.0


def test_gap_gradient_is_uniform():
    x = np.random.default_rng(1).standard_normal((3, 4, 4))
    err = check_gradient(lambda xs: sum_all(sigmoid(gap(xs[0]))), [x])
    assert err <= RTOL
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        tape.backward(sum_all(gap(xt)))
    assert np.allclose(xt.grad, 1.0 / 16.0)


def test_softmax_rows_symmetry():
    out = softmax_rows(Tensor([[0.0, 0.0]]))
    assert np.allclose(out.data, [[0.5, 0.5]], atol=1e-15)


def test_softmax_rows_stability():
    out = softmax_rows(Tensor([[1000.0, 0.0]]))
    assert abs(out.data[0, 0] - 1.0) <= 1e-12
    assert out.data[0, 1] <= 1e-12


def test_softmax_rows_sum_to_one():
    m = np.random.default_rng(2).standard_normal((8, 8))
    out = softmax_rows(Tensor(m))
    assert np.all(np.abs(out.data.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all(out.data >= 0.0)


def test_softmax_rows_shift_invariance():
    rng = np.random.default_rng(12)
    m = rng.standard_normal((4, 6))
    shifted = m + rng.standard_normal((4, 1))
    a = softmax_rows(Tensor(m)).data
    b = softmax_rows(Tensor(shifted)).data
    assert np.allclose(a, b, atol=1e-12)


def test_softmax_rows_gradient_vs_fd():
    m = np.random.default_rng(13).standard_normal((3, 4))
    err = check_gradient(lambda xs: sum_all(mul(softmax_rows(xs[0]), xs[1])),
                         [m, np.random.default_rng(14).standard_normal((3, 4))])
    assert err <= RTOL


def test_minmax_normalize_basic():
    assert np.allclose(minmax_normalize(Tensor([2.0, 4.0, 6.0])).data, [0.0, 0.5, 1.0])
    assert np.allclose(minmax_normalize(Tensor([-1.0, 0.0, 3.0])).data, [0.0, 0.25, 1.0])


def test_minmax_normalize_constant_is_zero():
    out = minmax_normalize(Tensor(np.full((3, 3), 7.0)))
    assert np.array_equal(out.data, np.zeros((3, 3)))


def test_minmax_normalize_idempotent_and_bounded():
    rng = np.random.default_rng(21)
    m = rng.standard_normal((5, 5))
    z = minmax_normalize(Tensor(m)).data
    assert z.min() >= 0.0 and z.max() <= 1.0
    z2 = minmax_normalize(Tensor(z)).data
    assert np.allclose(z, z2, atol=1e-15)


def test_minmax_normalize_gradient_vs_fd():
    rng = np.random.default_rng(22)
    m = rng.standard_normal((4, 4))
    w = rng.standard_normal((4, 4))
    err = check_gradient(lambda xs: sum_all(mul(minmax_normalize(xs[0]), xs[1])), [m, w])
    assert err <= RTOL


def test_reshape_roundtrip():
    x = np.random.default_rng(23).standard_normal((28, 32, 32))
    flat = reshape(Tensor(x), (28, 1024))
    back = reshape(flat, (28, 32, 32))
    assert np.array_equal(back.data, x)
    with pytest.raises(ShapeError):
        reshape(Tensor(x), (28, 1000))


def test_concat_channels():
    a = Tensor(np.ones((2, 3, 3)))
    b = Tensor(np.zeros((4, 3, 3)))
    out = concat([a, b])
    assert out.shape == (6, 3, 3)
    with pytest.raises(ShapeError):
        concat([a, Tensor(np.zeros((4, 2, 3)))])


def test_upsample_constant_stays_constant():
    out = upsample_bilinear(Tensor(np.full((2, 2), 3.5)), (5, 7))
    assert np.allclose(out.data, 3.5, atol=1e-12)


def test_upsample_columns_linear():
    x = np.array([[0.0, 1.0], [0.0, 1.0]])
    out = upsample_bilinear(Tensor(x), (2, 4))
    # corner-aligned: columns hit j/3 exactly
    expected = np.array([[0.0, 1 / 3, 2 / 3, 1.0]] * 2)
    assert np.allclose(out.data, expected, atol=1e-12)


def test_upsample_gradient_vs_fd():
    rng = np.random.default_rng(24)
    x = rng.standard_normal((2, 3, 3))
    w = rng.standard_normal((2, 6, 6))
    err = check_gradient(
        lambda xs: sum_all(mul(upsample_bilinear(xs[0], (6, 6)), xs[1])), [x, w]
    )
    assert err <= RTOL


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6, dtype=float).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        tape.backward(sum_all(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_sigmoid_quarter():
    x = Tensor(np.zeros(5), requires_grad=True)
    with Tape() as tape:
        tape.backward(sum_all(sigmoid(x)))
    assert np.allclose(x.grad, 0.25)


def test_backward_rejects_nonscalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = mul(x, x)
        with pytest.raises(ShapeError):
            tape.backward(y)


def test_backward_accumulates_without_reset():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(x)
        tape.backward(loss)
        tape.backward(loss)
    assert np.allclose(x.grad, 2.0)


def test_composite_net_gradient_vs_fd():
    # conv -> relu -> gap -> sigmoid, the layered path used by the real nets
    rng = np.random.default_rng(31)
    x = rng.standard_normal((2, 6, 6))
    k = rng.standard_normal((3, 2, 3, 3))
    w = rng.standard_normal(3)

    def f(xs):
        feat = relu(conv2d(xs[0], xs[1], stride=2, pad=1))
        return sum_all(sigmoid(mul(gap(feat), xs[2])))

    assert check_gradient(f, [x, k, w]) <= RTOL


def test_sgd_step_basic():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([2.0])
    sgd_step([p], 0.1)
    assert np.allclose(p.data, [0.8])
    assert p.grad is None


def test_sgd_step_zero_lr():
    p = Tensor(np.array([3.0]), requires_grad=True)
    p.grad = np.array([5.0])
    sgd_step([p], 0.0)
    assert np.allclose(p.data, [3.0])


def test_sgd_step_missing_grad_errors():
    p = Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(NumericError):
        sgd_step([p], 0.1)


def test_sgd_two_steps_decrease_quadratic():
    p = Tensor(np.array([3.0]), requires_grad=True)

    def loss_value():
        return float(p.data[0] ** 2)

    losses = [loss_value()]
    for _ in range(2):
        with Tape() as tape:
            loss = mul(p, p)
            tape.backward(sum_all(loss))
        sgd_step([p], 0.1)
        losses.append(loss_value())
    assert losses[2] < losses[1] < losses[0]


def test_ops_deterministic():
    rng = np.random.default_rng(41)
    x = rng.standard_normal((3, 8, 8))
    k = rng.standard_normal((4, 3, 3, 3))
    a = conv2d(Tensor(x), Tensor(k), stride=2, pad=1).data
    b = conv2d(Tensor(x), Tensor(k), stride=2, pad=1).data
    assert a.tobytes() == b.tobytes()


def test_gradient_property_random_instances():
    # spec invariant: every differentiable op within 1e-4 on >= 10 random cases
    rng = np.random.default_rng(55)
    for trial in range(10):
        x = rng.standard_normal((2, 4, 4))
        w = rng.standard_normal((2, 4, 4))

        def f(xs):
            y = relu(add(mul(xs[0], xs[1]), xs[0]))
            return sum_all(sigmoid(y))

        assert check_gradient(f, [x, w]) <= RTOL

import numpy as np
import pytest

from m2msplat import tensor as T
from m2msplat.tensor import ConvLayer, GradTape, ShapeError, Tensor, grad_check


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


# ---------------------------------------------------------------- conv2d


def test_conv2d_scaling_and_identity():
    x = np.ones((1, 3, 3))
    out = T.conv2d(x, np.full((1, 1, 1, 1), 2.0), np.zeros(1))
    np.testing.assert_array_equal(out.data, np.full((1, 3, 3), 2.0))
    x = np.random.default_rng(0).standard_normal((1, 4, 5))
    np.testing.assert_array_equal(T.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1)).data, x)


def _brute_conv(x, w, b, stride, pad):
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    co, ci, k, _ = w.shape
    ho = (x.shape[1] + 2 * pad - k) // stride + 1
    wo = (x.shape[2] + 2 * pad - k) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
                out[o, i, j] = np.sum(patch * w[o]) + b[o]
    return out


def test_conv2d_matches_nested_loops():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 8, 8))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = T.conv2d(x, w, b, stride=2, padding=1).data
    assert out.shape == (3, 4, 4)
    np.testing.assert_allclose(out, _brute_conv(x, w, b, 2, 1), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("h,k,s,p", [(7, 3, 1, 0), (7, 3, 2, 1), (8, 4, 2, 1), (5, 1, 1, 0), (9, 5, 3, 2)])
def test_conv_layer_output_size(h, k, s, p):
    layer = ConvLayer(2, 3, k, s, p, dtype=np.float64)
    out = layer(np.zeros((2, h, h + 1)))
    assert out.shape == (3, (h + 2 * p - k) // s + 1, (h + 1 + 2 * p - k) // s + 1)


def test_conv2d_shape_errors():
    with pytest.raises(ShapeError, match="channels"):
        T.conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(ShapeError, match="bias"):
        T.conv2d(np.zeros((3, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(2))
    with pytest.raises(ShapeError, match="smaller than kernel"):
        T.conv2d(np.zeros((1, 2, 2)), np.zeros((1, 1, 3, 3)))
    with pytest.raises(ShapeError):
        T.conv2d(np.zeros((4, 4)), np.zeros((1, 1, 1, 1)))


def test_conv_layer_init_bounds():
    layer = ConvLayer(4, 6, 3, rng=np.random.default_rng(0))
    bound = 1 / np.sqrt(4 * 9)
    assert layer.weight.shape == (6, 4, 3, 3)
    assert np.abs(layer.weight.data).max() <= bound
    assert np.abs(layer.bias.data).max() <= bound
    assert layer.weight.dtype == np.float32


# ------------------------------------------------------- transposed conv


def test_conv_transpose_single_pixel_spread():
    out = T.conv_transpose2d(np.full((1, 1, 1), 1.7), np.ones((1, 1, 2, 2)), None, stride=2)
    np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 1.7))


def test_conv_transpose_zero_input_gives_bias():
    b = np.array([0.3, -0.2])
    out = T.conv_transpose2d(np.zeros((3, 4, 4)), np.ones((3, 2, 4, 4)), b, stride=2, padding=1)
    assert out.shape == (2, 8, 8)
    np.testing.assert_array_equal(out.data, np.broadcast_to(b[:, None, None], (2, 8, 8)))


def test_conv_transpose_equals_conv_input_gradient():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((3, 2, 4, 4))  # conv2d: 2 -> 3 channels
    x = rng.standard_normal((2, 8, 8))
    y = rng.standard_normal((3, 4, 4))
    xt = Tensor(x, requires_grad=True)
    with GradTape() as tape:
        out = T.conv2d(xt, w, None, 2, 1)
    tape.backward(out, y)
    up = T.conv_transpose2d(y, w, None, 2, 1).data
    np.testing.assert_allclose(up, xt.grad, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride,pad,k,size", [(1, 1, 3, 8), (2, 1, 3, 9), (2, 1, 4, 8), (2, 0, 2, 8)])
def test_conv_adjoint_identity(stride, pad, k, size):
    rng = np.random.default_rng(stride * 10 + k)
    w = rng.standard_normal((3, 2, k, k))
    x = rng.standard_normal((2, size, size))
    fx = T.conv2d(x, w, None, stride, pad).data
    y = rng.standard_normal(fx.shape)
    back = T.conv_transpose2d(y, w, None, stride, pad).data
    assert back.shape == x.shape
    lhs = np.sum(fx * y)
    rhs = np.sum(x * back)
    assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs))


# ------------------------------------------------------------ activations


def test_prelu_values_and_gradient():
    slope = np.array([0.25])
    x = np.array([2.0, -2.0]).reshape(1, 1, 2)
    np.testing.assert_array_equal(T.prelu(x, slope).data.ravel(), [2.0, -0.5])
    xt = Tensor(np.full((1, 1, 1), -1.0))
    assert grad_check(lambda v: T.prelu(v, slope), xt, eps=1e-6) < 1e-8
    xt = Tensor(np.full((1, 1, 1), -1.0), requires_grad=True)
    with GradTape() as tape:
        y = T.prelu(xt, slope)
    tape.backward(y, np.ones((1, 1, 1)))
    assert xt.grad.item() == 0.25
    with pytest.raises(ShapeError):
        T.prelu(np.zeros((2, 3, 3)), np.zeros(3))


def test_sigmoid_values_and_saturation():
    assert T.sigmoid(np.array(0.0)).item() == 0.5
    for dt in (np.float32, np.float64):
        big = T.sigmoid(np.array([1e4, -1e4], dtype=dt)).data
        assert np.all(np.isfinite(big))
        assert big[0] < 1.0 and big[1] > 0.0
    x = np.linspace(-4, 4, 9)
    xt = Tensor(x, requires_grad=True)
    with GradTape() as tape:
        y = T.sigmoid(xt)
    tape.backward(y, np.ones_like(x))
    np.testing.assert_allclose(xt.grad, y.data * (1 - y.data), rtol=1e-12)
    assert grad_check(T.sigmoid, Tensor(x), eps=1e-6) < 1e-8


# --------------------------------------------------------------- pooling


def test_global_avg_pool_shapes_and_values():
    x = np.arange(1.0, 5.0).reshape(1, 2, 2)
    assert T.global_avg_pool(x, "hw").data.ravel().tolist() == [2.5]
    y = np.random.default_rng(3).standard_normal((3, 4, 5))
    assert T.global_avg_pool(y, "hw").shape == (3, 1, 1)
    assert T.global_avg_pool(y, "cw").shape == (1, 4, 1)
    assert T.global_avg_pool(y, "ch").shape == (1, 1, 5)
    c = np.full((2, 3, 4), 1.25)
    for mode in ("hw", "cw", "ch"):
        assert np.all(T.global_avg_pool(c, mode).data == 1.25)
    pooled = T.global_avg_pool(y, "hw").data
    np.testing.assert_allclose(np.broadcast_to(pooled, y.shape).sum(axis=(1, 2)), y.sum(axis=(1, 2)))
    for bad in ("", "x", "hq"):
        with pytest.raises(ShapeError):
            T.global_avg_pool(y, bad)


# ------------------------------------------------------------- kronecker


def test_kronecker_rank1_values():
    out = T.kronecker_rank1(np.array([1.0, 2.0]), np.array([3.0]), np.array([4.0, 5.0])).data
    np.testing.assert_array_equal(out, [[[12, 15]], [[24, 30]]])
    ones = T.kronecker_rank1(np.ones(3), np.ones(4), np.ones(2)).data
    np.testing.assert_array_equal(ones, np.ones((3, 4, 2)))
    with pytest.raises(ShapeError):
        T.kronecker_rank1(np.ones(0), np.ones(2), np.ones(2))


def test_kronecker_rank1_unfoldings_have_rank_one():
    rng = np.random.default_rng(4)
    for _ in range(20):
        u, v, w = rng.standard_normal(5), rng.standard_normal(6), rng.standard_normal(7)
        t = T.kronecker_rank1(u, v, w).data
        for mode in range(3):
            unfold = np.moveaxis(t, mode, 0).reshape(t.shape[mode], -1)
            s = np.linalg.svd(unfold, compute_uv=False)
            assert s[1] < 1e-8 * s[0]


# ------------------------------------------------------------ grad check


def test_grad_check_linear_is_exact():
    x = Tensor(np.random.default_rng(5).standard_normal((3, 4)))
    assert grad_check(lambda v: T.mul(v, 3.0), x) <= 1e-10


def test_grad_check_conv2d():
    rng = np.random.default_rng(6)
    w, b = rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    err = grad_check(lambda v: T.conv2d(v, w, b, 1, 1), _rand(rng, 2, 5, 5), eps=1e-6)
    assert err < 1e-6


def test_grad_check_reports_non_finite():
    with np.errstate(all="ignore"), pytest.raises(FloatingPointError):
        grad_check(lambda v: T.div(v, 0.0), Tensor(np.ones(2)))


# ------------------------------------------------------------------ tape


def test_tape_replays_in_reverse_order():
    order = []
    a = Tensor(np.array(1.0), requires_grad=True)
    b = Tensor(np.array(2.0), requires_grad=True)
    c = Tensor(np.array(3.0), requires_grad=True)
    tape = GradTape()
    tape.record(b, (a,), lambda g: order.append("b") or (g,))
    tape.record(c, (b,), lambda g: order.append("c") or (g,))
    tape.backward(c)
    assert order == ["c", "b"]
    assert a.grad.item() == 1.0


def test_tape_accumulates_shared_inputs():
    a = Tensor(np.array(2.0), requires_grad=True)
    with GradTape() as tape:
        c = T.add(T.mul(a, a), a)
    assert len(tape) == 2
    tape.backward(c)
    assert a.grad.item() == 5.0


def test_ops_outside_tape_are_not_recorded():
    a = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        with T.no_tape():
            T.exp(a)
        T.exp(a)
    assert len(tape) == 1


def test_ops_are_pure_and_deterministic():
    rng = np.random.default_rng(7)
    x, w = rng.standard_normal((2, 9, 9)), rng.standard_normal((4, 2, 3, 3))
    a = T.conv2d(x, w, None, 2, 1).data
    b = T.conv2d(x.copy(), w.copy(), None, 2, 1).data
    assert a.tobytes() == b.tobytes()


def test_ops_reject_non_finite_results():
    with np.errstate(all="ignore"):
        with pytest.raises(FloatingPointError):
            T.exp(np.array([1e4]))
        with pytest.raises(FloatingPointError):
            T.div(np.ones(2), np.zeros(2))


def test_integer_input_promotes_to_float32():
    assert T.as_tensor([1, 2]).dtype == np.float32


def test_flop_counter_counts_conv_macs():
    with T.FlopCounter() as fc:
        T.conv2d(np.zeros((2, 4, 4)), np.zeros((3, 2, 3, 3)), None, 1, 1)
    assert fc.flops == 2 * (3 * 4 * 4) * 2 * 9


def test_tensor_dump_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    for shape in [(), (5,), (2, 3, 4)]:
        x = rng.standard_normal(shape).astype(np.float32)
        path = tmp_path / "t.bin"
        T.dump_tensor(path, x)
        raw = path.read_bytes()
        assert raw[:4] == len(shape).to_bytes(4, "little")
        y = T.load_tensor(path).data
        assert y.shape == shape and y.tobytes() == x.tobytes()
    path.write_bytes(raw[:-2])
    with pytest.raises(ValueError):
        T.load_tensor(path)

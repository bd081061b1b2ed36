import numpy as np
import pytest

from m2msplat.tensor import Tensor, grad_check
from m2msplat.warp import (SplatAccumulator, _splat_footprint, backward_warp, check_flow,
                           resize_bilinear, resize_flow, scale_flow, splat, splat_forward)


def _flow(h, w, u=0.0, v=0.0):
    f = np.zeros((2, h, w))
    f[0], f[1] = u, v
    return f


# ------------------------------------------------------------ scale_flow


def test_scale_flow_examples():
    f = _flow(1, 1, 2, 4)
    np.testing.assert_array_equal(scale_flow(f, 0.5, 0).ravel(), [1, 2])
    np.testing.assert_array_equal(scale_flow(f, 0.0, 0), np.zeros_like(f))
    np.testing.assert_array_equal(scale_flow(_flow(1, 1, 4, 0), 0.25, 1).ravel(), [3, 0])


def test_scale_flow_linear_and_rejects_extrapolation():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((4, 2, 5, 5))
    for t in (0.1, 0.3, 0.9):
        np.testing.assert_allclose(scale_flow(f, t, 0) + scale_flow(f, t, 1), f)
        np.testing.assert_allclose(scale_flow(2 * f, t, 0), 2 * scale_flow(f, t, 0))
    for bad in (-0.01, 1.01):
        with pytest.raises(ValueError):
            scale_flow(f, bad, 0)
    with pytest.raises(ValueError):
        scale_flow(f, 0.5, 2)


def test_check_flow_guards():
    with pytest.raises(ValueError):
        check_flow(np.zeros((3, 4, 4)))
    with pytest.raises(ValueError):
        check_flow(np.full((2, 4, 4), np.nan))
    with pytest.raises(ValueError):
        check_flow(np.full((2, 4, 4), 17.0))
    check_flow(np.full((2, 4, 4), 16.0))


# ---------------------------------------------------------- backward_warp


def test_backward_warp_examples():
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(3, 5, 6))
    np.testing.assert_array_equal(backward_warp(img, _flow(5, 6)).data, img)
    ramp = np.broadcast_to(np.arange(6.0), (1, 4, 6)).copy()
    out = backward_warp(ramp, _flow(4, 6, 1, 0)).data
    np.testing.assert_array_equal(out[0, 0], np.minimum(np.arange(6) + 1, 5))
    row = np.zeros((1, 1, 5))
    row[0, 0, 1] = 1.0
    assert backward_warp(row, _flow(1, 5, 0.5, 0)).data[0, 0, 0] == 0.5


def test_backward_warp_batched_and_shared_flow():
    rng = np.random.default_rng(2)
    imgs = rng.uniform(size=(2, 3, 6, 6))
    f = rng.uniform(-2, 2, size=(2, 6, 6))
    both = backward_warp(imgs, f).data
    for i in range(2):
        np.testing.assert_allclose(both[i], backward_warp(imgs[i], f).data)
    with pytest.raises(ValueError):
        backward_warp(imgs, np.zeros((2, 5, 6)))


# ----------------------------------------------------------------- splat


def test_splat_identity():
    rng = np.random.default_rng(3)
    colors = rng.uniform(size=(3, 4, 5))
    acc = splat_forward(colors, np.ones((4, 5)), _flow(4, 5))
    np.testing.assert_array_equal(acc.denominator.data, np.ones((4, 5)))
    np.testing.assert_allclose(acc.numerator.data, colors)
    assert not acc.holes.any()


def _single(h, w, src, flow_uv):
    colors = np.zeros((3, h, w))
    weights = np.zeros((h, w))
    weights[src[1], src[0]] = 1.0
    f = _flow(h, w)
    f[:, src[1], src[0]] = flow_uv
    return splat_forward(colors, weights, f).denominator.data


def test_splat_integer_and_half_landing():
    den = _single(6, 6, (0, 0), (2, 3))
    assert den[3, 2] == 1.0 and den.sum() == 1.0
    den = _single(6, 6, (0, 0), (1.5, 2.0))
    assert den[2, 1] == 0.5 and den[2, 2] == 0.5 and den.sum() == 1.0


def test_partition_of_unity_before_clipping():
    rng = np.random.default_rng(4)
    f = rng.uniform(-20, 20, size=(2, 7, 9))
    _, _, coef, _, _ = _splat_footprint(f, 7, 9, np.float64)
    np.testing.assert_allclose(coef.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_splat_mass_conservation_in_bounds():
    rng = np.random.default_rng(5)
    h, w = 12, 12
    gy, gx = np.mgrid[0:h, 0:w]
    for _ in range(20):
        f = rng.uniform(-3, 3, size=(2, h, w))
        # keep every footprint inside the frame
        f[0] = np.clip(gx + f[0], 0, w - 1.001) - gx
        f[1] = np.clip(gy + f[1], 0, h - 1.001) - gy
        wts = rng.uniform(0.1, 2.0, size=(h, w))
        acc = splat_forward(rng.uniform(size=(3, h, w)), wts, f)
        assert abs(acc.denominator.data.sum() - wts.sum()) <= 1e-5 * wts.sum()


def test_integer_flow_equivariance():
    rng = np.random.default_rng(6)
    img = rng.uniform(size=(3, 6, 7))
    out = splat(img, _flow(6, 7, 2, -1)).data
    expect = np.zeros_like(img)
    expect[:, :5, 2:] = img[:, 1:, :5]
    np.testing.assert_allclose(out, expect)


def test_out_of_frame_contributions_dropped():
    den = _single(4, 4, (3, 3), (5, 5))
    assert den.sum() == 0.0


def test_splat_rejects_bad_weights():
    colors = np.zeros((3, 3, 3))
    with pytest.raises(ValueError):
        splat_forward(colors, -np.ones((3, 3)), _flow(3, 3))
    with pytest.raises(ValueError):
        splat_forward(colors, np.full((3, 3), np.inf), _flow(3, 3))
    with pytest.raises(ValueError):
        splat_forward(colors, np.ones((3, 3)), np.full((2, 3, 3), np.nan))


def test_multi_flow_splat_sums_sub_vectors():
    rng = np.random.default_rng(7)
    colors = rng.uniform(size=(3, 6, 6))
    wts = rng.uniform(0.5, 1.0, size=(6, 6))
    flows = rng.uniform(-1, 1, size=(3, 2, 6, 6))
    multi = splat_forward(colors, wts, flows)
    acc = None
    for n in range(3):
        acc = splat_forward(colors, wts, flows[n], acc)
    np.testing.assert_allclose(multi.numerator.data, acc.numerator.data, rtol=1e-12)
    np.testing.assert_allclose(multi.denominator.data, acc.denominator.data, rtol=1e-12)
    np.testing.assert_allclose(multi.max_weight, acc.max_weight, rtol=1e-12)


def test_splat_raster_order_is_reproducible():
    rng = np.random.default_rng(8)
    colors = rng.uniform(size=(3, 16, 16)).astype(np.float32)
    f = rng.uniform(-4, 4, size=(4, 2, 16, 16)).astype(np.float32)
    a = splat_forward(colors, np.ones((16, 16), np.float32), f)
    b = splat_forward(colors.copy(), np.ones((16, 16), np.float32), f.copy())
    assert a.numerator.data.tobytes() == b.numerator.data.tobytes()


def test_max_weight_tracks_largest_single_contribution():
    wts = np.array([[1.0, 3.0]])
    f = _flow(1, 2)
    f[0, 0, 0] = 1.0  # both land on pixel (0, 1)
    acc = splat_forward(np.zeros((3, 1, 2)), wts, f)
    np.testing.assert_array_equal(acc.max_weight, [[0.0, 3.0]])
    np.testing.assert_array_equal(acc.denominator.data, [[0.0, 4.0]])


def test_empty_accumulator_is_all_holes():
    acc = SplatAccumulator.empty(3, 4)
    assert acc.holes.all() and acc.numerator.shape == (3, 3, 4)


# ------------------------------------------------------------- gradients


def _off_grid(rng, *shape):
    return Tensor(rng.integers(-1, 2, size=shape) + rng.uniform(0.1, 0.9, size=shape))


def test_warp_and_splat_gradients():
    rng = np.random.default_rng(9)
    img = Tensor(rng.uniform(size=(2, 6, 6)))
    assert grad_check(backward_warp, [img, _off_grid(rng, 2, 6, 6)], eps=1e-6) < 1e-4
    img = Tensor(rng.uniform(size=(2, 6, 6)))
    assert grad_check(splat, [img, _off_grid(rng, 2, 6, 6)], eps=1e-6) < 1e-4

    def weighted(c, wt, f):
        acc = splat_forward(c, wt, f, track_max=False)
        return acc.numerator + acc.denominator.reshape((1, 6, 6))

    xs = [Tensor(rng.uniform(size=(3, 6, 6))), Tensor(rng.uniform(0.2, 1, size=(6, 6))),
          _off_grid(rng, 2, 6, 6)]
    assert grad_check(weighted, xs, eps=1e-6) < 1e-4


# ---------------------------------------------------------------- resize


def test_resize_helpers():
    img = np.random.default_rng(10).uniform(size=(3, 8, 8))
    np.testing.assert_allclose(resize_bilinear(img, (8, 8)), img)
    assert resize_bilinear(img, (4, 16)).shape == (3, 4, 16)
    const = _flow(4, 4, 1.0, -2.0)
    up = resize_flow(const, (8, 16))
    np.testing.assert_allclose(up[0], 4.0)
    np.testing.assert_allclose(up[1], -4.0)

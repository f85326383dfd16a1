import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdcn import kernels as K
from mdcn.tensor import ShapeError, as_tensor, check_finite, decode_mdt, encode_mdt, load_mdt, save_mdt
from mdcn.trainer import grad_check


def direct_conv(x, w, b, stride, pad, dilation):
    """Seven nested loops, no im2col, no BLAS."""
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    oh = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, k, oh, ow))
    for i in range(n):
        for o in range(k):
            for y in range(oh):
                for xx in range(ow):
                    acc = b[o]
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                iy = y * stride - pad + u * dilation
                                ix = xx * stride - pad + v * dilation
                                if 0 <= iy < h and 0 <= ix < wd:
                                    acc += w[o, ci, u, v] * x[i, ci, iy, ix]
                    out[i, o, y, xx] = acc
    return out


def brute_pool(x, window, stride, pad=0, ceil_mode=False):
    n, c, h, w = x.shape
    oh = K.pool_output_size(h, window, stride, pad, ceil_mode)
    ow = K.pool_output_size(w, window, stride, pad, ceil_mode)
    out = np.zeros((n, c, oh, ow))
    for i, ch, y, xx in itertools.product(range(n), range(c), range(oh), range(ow)):
        best = -np.inf
        for u in range(window):
            for v in range(window):
                iy, ix = y * stride - pad + u, xx * stride - pad + v
                if 0 <= iy < h and 0 <= ix < w:
                    best = max(best, x[i, ch, iy, ix])
        out[i, ch, y, xx] = best
    return out


# ---- convolution ---------------------------------------------------------


def test_identity_kernel_returns_input():
    x = np.ones((1, 1, 3, 3))
    p = K.ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(K.conv2d_forward(x, p), x)


def test_ones_kernel_sums_one_to_nine():
    x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    p = K.ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1))
    out = K.conv2d_forward(x, p)
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 45.0


def test_conv_matches_direct_oracle_stride2_pad1():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = K.conv2d_forward(x, K.ConvParams(w, b, 2, 1))
    ref = direct_conv(x, w, b, 2, 1, 1)
    assert out.shape == ref.shape == (2, 4, 4, 4)
    assert np.max(np.abs(out - ref)) <= 1e-12


@pytest.mark.parametrize("stride,pad,dilation,k", [(1, 0, 1, 1), (1, 1, 1, 3), (1, 2, 2, 3), (2, 0, 1, 1), (3, 2, 1, 3)])
def test_conv_matches_direct_oracle_geometries(stride, pad, dilation, k):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((1, 2, 7, 6))
    w = rng.standard_normal((3, 2, k, k))
    b = rng.standard_normal(3)
    out = K.conv2d_forward(x, K.ConvParams(w, b, stride, pad, dilation))
    np.testing.assert_allclose(out, direct_conv(x, w, b, stride, pad, dilation), atol=1e-12, rtol=0)


def test_conv_output_size_formula():
    assert K.conv_output_size(300, 3, 1, 1) == 300
    assert K.conv_output_size(19, 3, 1, 6, 6) == 19
    assert K.conv_output_size(8, 3, 2, 1) == 4
    assert K.conv_output_size(3, 3, 1, 0) == 1


def test_conv_channel_mismatch_names_dimension():
    p = K.ConvParams(np.zeros((2, 3, 3, 3)), np.zeros(2))
    with pytest.raises(ShapeError, match="channel"):
        K.conv2d_forward(np.zeros((1, 4, 5, 5)), p)


def test_conv_too_small_input_rejected():
    p = K.ConvParams(np.zeros((2, 3, 3, 3)), np.zeros(2))
    with pytest.raises(ShapeError):
        K.conv2d_forward(np.zeros((1, 3, 2, 2)), p)


def test_conv_params_validation():
    with pytest.raises(ShapeError):
        K.ConvParams(np.zeros((2, 3, 3, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        K.ConvParams(np.zeros((2, 3, 3, 3)), np.zeros(2), stride=0)


def test_conv_backward_zero_grad_gives_zero():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 6, 6))
    p = K.ConvParams(rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4), 2, 1)
    g = np.zeros_like(K.conv2d_forward(x, p))
    gx, gw, gb = K.conv2d_backward(x, p, g)
    assert not gx.any() and not gw.any() and not gb.any()


@pytest.mark.parametrize("stride,pad,dilation", [(1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 0, 1)])
def test_conv_backward_finite_differences(stride, pad, dilation):
    rng = np.random.default_rng(stride + 3 * pad + 7 * dilation)
    params = {
        "x": rng.standard_normal((2, 2, 6, 6)),
        "w": rng.standard_normal((3, 2, 3, 3)),
        "b": rng.standard_normal(3),
    }

    def fwd(p):
        return K.conv2d_forward(p["x"], K.ConvParams(p["w"], p["b"], stride, pad, dilation))

    weights = rng.standard_normal(fwd(params).shape)
    gx, gw, gb = K.conv2d_backward(
        params["x"], K.ConvParams(params["w"], params["b"], stride, pad, dilation), weights
    )
    report = grad_check(lambda p: fwd(p) * weights, params, {"x": gx, "w": gw, "b": gb}, 1e-6, sample=None)
    assert report.passed, report


def test_conv_is_deterministic():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 9, 9))
    p = K.ConvParams(rng.standard_normal((5, 3, 3, 3)), rng.standard_normal(5), 2, 1)
    a = K.conv2d_forward(x, p)
    b = K.conv2d_forward(x.copy(), p)
    assert a.tobytes() == b.tobytes()
    g = rng.standard_normal(a.shape)
    r1 = K.conv2d_backward(x, p, g)
    r2 = K.conv2d_backward(x, p, g)
    assert all(u.tobytes() == v.tobytes() for u, v in zip(r1, r2))


def test_stacked_3x3_pair_has_5x5_extent():
    x = np.zeros((1, 1, 9, 9))
    x[0, 0, 4, 4] = 1.0
    p = K.ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1), 1, 1)
    y = K.conv2d_forward(K.conv2d_forward(x, p), p)
    rows, cols = np.nonzero(y[0, 0])
    assert (rows.min(), rows.max(), cols.min(), cols.max()) == (2, 6, 2, 6)


# ---- pooling -------------------------------------------------------------


def test_pool_2x2_example():
    out, _ = K.maxpool2d(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2)
    np.testing.assert_array_equal(out, [[[[4.0]]]])


def test_pool_constant_input_first_index_tie_break():
    x = np.full((1, 1, 4, 4), 3.0)
    out, arg = K.maxpool2d(x, 2, 2)
    assert np.all(out == 3.0)
    # flat indices of each window's top-left element
    np.testing.assert_array_equal(arg.reshape(-1), [0, 2, 8, 10])


def test_pool_matches_brute_force_scan():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 6, 6))
    out, _ = K.maxpool2d(x, 2, 2)
    np.testing.assert_array_equal(out, brute_pool(x, 2, 2))


@pytest.mark.parametrize("window,stride,pad,ceil", [(2, 2, 0, True), (3, 1, 1, False), (3, 2, 1, True), (3, 2, 0, False)])
def test_pool_geometries_match_brute_force(window, stride, pad, ceil):
    rng = np.random.default_rng(window + stride)
    x = rng.standard_normal((2, 2, 7, 5))
    out, _ = K.maxpool2d(x, window, stride, pad, ceil)
    np.testing.assert_array_equal(out, brute_pool(x, window, stride, pad, ceil))


def test_pool_ceil_mode_sizes():
    assert K.pool_output_size(75, 2, 2, 0, True) == 38
    assert K.pool_output_size(75, 2, 2, 0, False) == 37
    assert K.pool_output_size(19, 3, 1, 1, False) == 19


def test_pool_backward_routes_to_argmax():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 2, 6, 6))
    out, arg = K.maxpool2d(x, 2, 2)
    g = rng.standard_normal(out.shape)
    gx = K.maxpool2d_backward(g, arg, x.shape)
    assert np.isclose(gx.sum(), g.sum())
    for c in range(2):
        for y in range(3):
            for xx in range(3):
                win = x[0, c, 2 * y : 2 * y + 2, 2 * xx : 2 * xx + 2]
                u, v = np.unravel_index(np.argmax(win), win.shape)
                assert gx[0, c, 2 * y + u, 2 * xx + v] == g[0, c, y, xx]


def test_pool_backward_accumulates_overlapping_windows():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 5.0
    out, arg = K.maxpool2d(x, 3, 1, 1)
    gx = K.maxpool2d_backward(np.ones_like(out), arg, x.shape)
    assert gx[0, 0, 1, 1] == 9.0


# ---- activations and normalization --------------------------------------


def test_softmax_equal_logits_uniform():
    for c in (2, 4, 7):
        np.testing.assert_allclose(K.softmax(np.zeros((3, c)), axis=1), 1.0 / c)


def test_softmax_large_logits_stable():
    y = K.softmax(np.array([[1000.0, 0.0, -1000.0]]), axis=1)
    assert np.all(np.isfinite(y))
    assert y[0, 0] == 1.0


def test_log_softmax_consistent():
    x = np.random.default_rng(5).standard_normal((4, 6))
    np.testing.assert_allclose(np.exp(K.log_softmax(x, 1)), K.softmax(x, 1), atol=1e-15)


def test_softmax_bad_axis():
    with pytest.raises(ValueError):
        K.softmax(np.zeros((2, 3)), axis=4)


def test_relu_and_backward():
    x = np.array([-2.0, -0.5, 0.5, 3.0])
    np.testing.assert_array_equal(K.relu(x), [0, 0, 0.5, 3.0])
    np.testing.assert_array_equal(K.relu_backward(x, np.ones(4)), [0, 0, 1, 1])


def test_l2norm_three_four_five():
    x = np.array([3.0, 4.0]).reshape(1, 2, 1, 1)
    y = K.l2_normalize_scale(x, np.ones(2))
    np.testing.assert_allclose(y.ravel(), [0.6, 0.8], atol=1e-15)


def test_l2norm_zero_vector_finite():
    y = K.l2_normalize_scale(np.zeros((1, 3, 2, 2)), np.full(3, 20.0))
    assert np.all(y == 0)
    gx, gs = K.l2_normalize_scale_backward(np.zeros((1, 3, 2, 2)), np.full(3, 20.0), np.ones((1, 3, 2, 2)))
    assert np.all(np.isfinite(gx)) and np.all(np.isfinite(gs))


def _fd_check(forward, backward, params, seed):
    rng = np.random.default_rng(seed)
    weights = rng.standard_normal(forward(params).shape)
    analytic = backward(params, weights)
    return grad_check(lambda p: forward(p) * weights, params, analytic, 1e-6, sample=None)


def test_relu_finite_differences_away_from_kink():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 4, 4))
    x = np.sign(x) * (np.abs(x) + 0.05)
    rep = _fd_check(lambda p: K.relu(p["x"]), lambda p, g: {"x": K.relu_backward(p["x"], g)}, {"x": x}, 6)
    assert rep.passed, rep


def test_softmax_finite_differences():
    x = np.random.default_rng(7).standard_normal((3, 5, 2))
    rep = _fd_check(
        lambda p: K.softmax(p["x"], axis=1),
        lambda p, g: {"x": K.softmax_backward(K.softmax(p["x"], axis=1), g, axis=1)},
        {"x": x},
        7,
    )
    assert rep.passed, rep


def test_l2norm_finite_differences():
    rng = np.random.default_rng(8)
    params = {"x": rng.standard_normal((2, 4, 3, 3)), "s": rng.uniform(0.5, 3.0, 4)}

    def bwd(p, g):
        gx, gs = K.l2_normalize_scale_backward(p["x"], p["s"], g)
        return {"x": gx, "s": gs}

    rep = _fd_check(lambda p: K.l2_normalize_scale(p["x"], p["s"]), bwd, params, 8)
    assert rep.passed, rep


def test_maxpool_finite_differences_distinct_values():
    x = np.random.default_rng(9).permutation(50).reshape(1, 2, 5, 5) * 0.01

    def bwd(p, g):
        _, arg = K.maxpool2d(p["x"], 3, 2, 1, True)
        return {"x": K.maxpool2d_backward(g, arg, p["x"].shape)}

    rep = _fd_check(lambda p: K.maxpool2d(p["x"], 3, 2, 1, True)[0], bwd, {"x": x.astype(float)}, 9)
    assert rep.passed, rep


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 2),
    st.integers(1, 3),
    st.integers(3, 7),
    st.integers(1, 3),
    st.sampled_from([1, 3]),
    st.integers(1, 2),
    st.integers(0, 2),
    st.integers(0, 2**31 - 1),
)
def test_conv_property_matches_oracle(n, c, size, k_out, kernel, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, size, size))
    w = rng.standard_normal((k_out, c, kernel, kernel))
    b = rng.standard_normal(k_out)
    if (size + 2 * pad - kernel) < 0:
        return
    out = K.conv2d_forward(x, K.ConvParams(w, b, stride, pad))
    np.testing.assert_allclose(out, direct_conv(x, w, b, stride, pad, 1), atol=1e-12, rtol=0)
    assert np.all(np.isfinite(out))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([(2, 2, 0, True), (3, 1, 1, False), (2, 2, 0, False)]))
def test_pool_property_matches_brute_force(seed, geom):
    x = np.random.default_rng(seed).standard_normal((1, 2, 5, 6))
    out, _ = K.maxpool2d(x, *geom)
    np.testing.assert_array_equal(out, brute_pool(x, *geom))


# ---- tensor container ----------------------------------------------------


def test_mdt_round_trip(tmp_path):
    arr = np.random.default_rng(10).standard_normal((2, 3, 4, 5))
    save_mdt(tmp_path / "t.mdt", arr)
    back = load_mdt(tmp_path / "t.mdt")
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_mdt_layout():
    buf = encode_mdt(np.array([[1.0, 2.0]]))
    assert buf[:4] == b"MDT1"
    assert int.from_bytes(buf[4:8], "little") == 2
    assert int.from_bytes(buf[8:16], "little") == 1
    assert int.from_bytes(buf[16:24], "little") == 2
    assert np.frombuffer(buf[24:], "<f8").tolist() == [1.0, 2.0]


def test_mdt_rejects_bad_magic_and_truncation():
    with pytest.raises(ValueError, match="magic"):
        decode_mdt(b"XXXX" + encode_mdt(np.zeros(2))[4:])
    with pytest.raises(ValueError, match="payload"):
        decode_mdt(encode_mdt(np.zeros(3))[:-8])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=0, max_size=4), st.integers(0, 2**31 - 1))
def test_mdt_round_trip_property(dims, seed):
    arr = np.asarray(np.random.default_rng(seed).standard_normal(dims))
    back = decode_mdt(encode_mdt(arr))
    assert back.shape == arr.shape and back.tobytes() == np.ascontiguousarray(arr).tobytes()


def test_as_tensor_and_check_finite():
    t = as_tensor([1, 2, 3, 4], (2, 2))
    assert t.dtype == np.float64 and t.flags.c_contiguous
    with pytest.raises(FloatingPointError):
        check_finite(np.array([1.0, np.nan]))

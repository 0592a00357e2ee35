import itertools

import numpy as np
import pytest

from prom import kernels
from prom.kernels import ConvParams, _pykernels
from prom.kernels.counting import CountingKernels, Counter
from prom.quant import Int8Tensor, TernaryTensor, dequantize, quantize_activation_int8, quantize_pointwise_ternary
from prom.quant import quantize_weight_int8
from prom.tensor import ShapeError

BACKENDS = kernels.available_backends()


def brute_conv(x, w, stride, pad, groups):
    """Loop-by-loop cross-correlation, exact in the input dtype's integer or float ring."""
    B, C, H, W = x.shape
    O, CG, K, _ = w.shape
    Ho, Wo = (H + 2 * pad - K) // stride + 1, (W + 2 * pad - K) // stride + 1
    out = np.zeros((B, O, Ho, Wo), dtype=np.int64 if x.dtype.kind == "i" else np.float64)
    OG = O // groups
    for b, o, oh, ow in itertools.product(range(B), range(O), range(Ho), range(Wo)):
        s = 0
        for ci, kh, kw in itertools.product(range(CG), range(K), range(K)):
            ih, iw = oh * stride + kh - pad, ow * stride + kw - pad
            if 0 <= ih < H and 0 <= iw < W:
                s += int(x[b, (o // OG) * CG + ci, ih, iw]) * int(w[o, ci, kh, kw]) if x.dtype.kind == "i" \
                    else float(x[b, (o // OG) * CG + ci, ih, iw]) * float(w[o, ci, kh, kw])
        out[b, o, oh, ow] = s
    return out


def rand_case(g, depthwise=False):
    B, C = int(g.integers(1, 3)), int(g.integers(1, 6))
    H, W = int(g.integers(1, 7)), int(g.integers(1, 7))
    K = int(g.choice([1, 3]))
    if K > H + 2 or K > W + 2:
        K = 1
    stride, pad = int(g.integers(1, 3)), K // 2
    if depthwise:
        O, groups = C, C
    else:
        groups = 1
        O = int(g.integers(1, 6))
    x = g.integers(-128, 128, size=(B, C, H, W)).astype(np.int8)
    w = g.integers(-128, 128, size=(O, C // groups, K, K)).astype(np.int8)
    return x, w, stride, pad, groups


@pytest.fixture(params=BACKENDS)
def backend(request):
    with kernels.use_backend(request.param):
        yield request.param


def test_c_backend_built():
    assert "python" in BACKENDS
    assert kernels.backend_name() in ("c", "python")


def test_pointwise_ternary_matches_multiply_oracle(backend, g):
    for _ in range(50):
        B, C, O, H, W = (int(v) for v in g.integers(1, 9, size=5))
        x = Int8Tensor(g.integers(-128, 128, size=(B, C, H, W)).astype(np.int8), np.ones(B, np.float32),
                       "per_batch_element")
        t = TernaryTensor(g.integers(-1, 2, size=(O, C, 1, 1)).astype(np.int8), np.ones(O, np.float32))
        ref = np.einsum("bchw,oc->bohw", x.values.astype(np.int64), t.trits[:, :, 0, 0].astype(np.int64))
        got = kernels.pointwise_ternary_conv(x, t)
        assert got.dtype == np.int32
        assert np.array_equal(got, ref)


@pytest.mark.parametrize("depthwise", [False, True])
def test_conv_int8_matches_brute_force(backend, g, depthwise):
    for _ in range(25):
        x, w, s, p, groups = rand_case(g, depthwise)
        xq = Int8Tensor(x, np.ones(len(x), np.float32), "per_batch_element")
        wq = Int8Tensor(w, np.ones(len(w), np.float32))
        got = kernels.conv2d_int8(xq, wq, ConvParams(s, p, groups))
        assert np.array_equal(got, brute_conv(x, w, s, p, groups))


def test_conv_extreme_values_exact(backend):
    # every product is (-128)(-128); the sum must stay exact in int32
    x = Int8Tensor(np.full((1, 64, 3, 3), -128, np.int8), np.ones(1, np.float32), "per_batch_element")
    w = Int8Tensor(np.full((2, 64, 3, 3), -128, np.int8), np.ones(2, np.float32))
    got = kernels.conv2d_int8(x, w, ConvParams(1, 0, 1))
    assert got[0, 0, 0, 0] == 64 * 9 * 128 * 128


def test_linear_int8(backend, g):
    x = g.integers(-128, 128, size=(3, 17)).astype(np.int8)
    w = g.integers(-128, 128, size=(5, 17)).astype(np.int8)
    got = kernels.linear_int8(Int8Tensor(x, np.ones(3, np.float32), "per_batch_element"),
                              Int8Tensor(w, np.ones(5, np.float32)))
    assert np.array_equal(got, x.astype(np.int64) @ w.astype(np.int64).T)


def test_dequantized_integer_conv_matches_float_oracle(backend, g):
    for _ in range(30):
        x, w, s, p, groups = rand_case(g, bool(g.integers(0, 2)))
        xf = g.standard_normal(x.shape).astype(np.float32)
        wf = g.standard_normal(w.shape).astype(np.float32)
        xq, wq = quantize_activation_int8(xf), quantize_weight_int8(wf)
        got = kernels.dequant_output(kernels.conv2d_int8(xq, wq, ConvParams(s, p, groups)), wq.scale, xq.scale,
                                     "int8", np.float64)
        want = brute_conv(dequantize(xq, np.float64), dequantize(wq, np.float64), s, p, groups)
        assert np.allclose(got, want, rtol=1e-10, atol=1e-12)
        if w.shape[2] == 1 and groups == 1:
            tq = quantize_pointwise_ternary(wf)
            got = kernels.dequant_output(kernels.pointwise_ternary_conv(
                Int8Tensor(np.ascontiguousarray(xq.values[:, :, ::s, ::s]), xq.scale, xq.scale_kind), tq),
                tq.alpha, xq.scale, "ternary", np.float64)
            want = brute_conv(dequantize(xq, np.float64), dequantize(tq, np.float64), s, 0, 1)
            assert np.allclose(got, want, rtol=1e-10, atol=1e-12)


def test_conv2d_float_matches_brute_force(g):
    for _ in range(20):
        x, w, s, p, groups = rand_case(g, bool(g.integers(0, 2)))
        xf, wf = x.astype(np.float64) / 7, w.astype(np.float64) / 11
        assert np.allclose(kernels.conv2d_float(xf, wf, ConvParams(s, p, groups)), brute_conv(xf, wf, s, p, groups))


def test_shape_and_overflow_errors():
    x = Int8Tensor(np.zeros((1, 4, 3, 3), np.int8), np.ones(1, np.float32), "per_batch_element")
    with pytest.raises(ShapeError):
        kernels.conv2d_int8(x, Int8Tensor(np.zeros((2, 3, 1, 1), np.int8), np.ones(2, np.float32)))
    with pytest.raises(ShapeError):
        kernels.pointwise_ternary_conv(x, TernaryTensor(np.zeros((2, 4, 3, 3), np.int8), np.ones(2, np.float32)))
    with pytest.raises(ShapeError):
        kernels.conv2d_int8(x, Int8Tensor(np.zeros((2, 4, 5, 5), np.int8), np.ones(2, np.float32)))
    big = 2**31 // (128 * 128) + 1
    xb = Int8Tensor(np.zeros((1, big, 1, 1), np.int8), np.ones(1, np.float32), "per_batch_element")
    with pytest.raises(ShapeError):
        kernels.conv2d_int8(xb, Int8Tensor(np.zeros((1, big, 1, 1), np.int8), np.ones(1, np.float32)))
    with pytest.raises(ValueError):
        ConvParams(stride=0)
    with pytest.raises(ValueError):
        kernels.dequant_output(np.zeros((1, 1)), [1.0], [1.0], "int4")


def test_ternary_kernel_is_multiplication_free(g):
    counter = Counter()
    x = quantize_activation_int8(g.standard_normal((2, 32, 5, 5)).astype(np.float32))
    t = quantize_pointwise_ternary(g.standard_normal((16, 32, 1, 1)).astype(np.float32))
    with kernels.use_backend(CountingKernels(counter)):
        got = kernels.pointwise_ternary_conv(x, t)
    assert np.array_equal(got, _pykernels.pw_ternary(x.values.reshape(2, 32, 25), t.trits.reshape(16, 32))
                          .reshape(got.shape))
    tally = counter.total("pw_ternary")
    assert tally.muls == 0
    assert tally.adds == np.count_nonzero(t.trits) * 2 * 25


def test_counting_int8_conv_mul_count_equals_macs(g):
    counter = Counter()
    x = quantize_activation_int8(g.standard_normal((1, 6, 8, 8)).astype(np.float32))
    w = quantize_weight_int8(g.standard_normal((6, 1, 3, 3)).astype(np.float32))
    with kernels.use_backend(CountingKernels(counter)):
        got = kernels.conv2d_int8(x, w, ConvParams(2, 1, 6))
    assert np.array_equal(got, brute_conv(x.values, w.values, 2, 1, 6))
    assert counter.total("conv_int8").muls == 6 * 1 * 9 * 4 * 4


def test_backend_selection():
    before = kernels.backend_name()
    with kernels.use_backend("python"):
        assert kernels.backend_name() == "python"
    assert kernels.backend_name() == before
    with pytest.raises(ValueError):
        kernels.set_backend("fortran")


@pytest.mark.parametrize("stride", [1, 2])
def test_depthwise_float_forward_backward(backend, g, stride):
    x = g.standard_normal((2, 3, 7, 6))
    w = g.standard_normal((3, 1, 3, 3))
    y = kernels.depthwise_conv_float(x, w, stride, 1)
    assert np.allclose(y, brute_conv(x, w, stride, 1, 3))
    dy = g.standard_normal(y.shape)
    dx, dw = kernels.depthwise_conv_float_backward(x, w, dy, stride, 1)
    # adjoint identities: <dy, conv(x)> is linear in x and in w
    num_dx = np.zeros_like(x)
    for idx in itertools.product(*map(range, x.shape)):
        e = np.zeros_like(x)
        e[idx] = 1
        num_dx[idx] = (dy * brute_conv(e, w, stride, 1, 3)).sum()
    assert np.allclose(dx, num_dx)
    num_dw = np.zeros_like(w)
    for idx in itertools.product(*map(range, w.shape)):
        e = np.zeros_like(w)
        e[idx] = 1
        num_dw[idx] = (dy * brute_conv(x, e, stride, 1, 3)).sum()
    assert np.allclose(dw, num_dw)


def test_elementwise_float_kernels(backend, g):
    x = g.standard_normal((2, 4, 3, 5)).astype(np.float32)
    x[0, 0, 0, :2] = 0.0
    slope = g.uniform(0, 0.5, 4).astype(np.float32)
    dy = g.standard_normal(x.shape).astype(np.float32)
    s = slope[None, :, None, None]
    assert np.array_equal(kernels.prelu_float(x, slope), np.where(x < 0, x * s, x))
    dx, ds = kernels.prelu_float_backward(x, slope, dy)
    assert np.array_equal(dx, np.where(x < 0, s * dy, dy))  # slope 1 at the kink
    assert np.allclose(ds, (np.minimum(x, 0) * dy).sum(axis=(0, 2, 3)), rtol=1e-5)
    xhat = g.standard_normal(x.shape).astype(np.float32)
    scale = g.uniform(0.5, 2, 4).astype(np.float32)
    for batch_stats in (True, False):
        dx, dg, db = kernels.batchnorm_float_backward(xhat, dy, scale, batch_stats)
        m = 2 * 3 * 5
        dgr = (dy * xhat).sum(axis=(0, 2, 3))
        dbr = dy.sum(axis=(0, 2, 3))
        ref = dy - (xhat * dgr[None, :, None, None] + dbr[None, :, None, None]) / m if batch_stats else dy
        assert np.allclose(dx, ref * scale[None, :, None, None], rtol=1e-4, atol=1e-5)
        assert np.allclose(dg, dgr, rtol=1e-5) and np.allclose(db, dbr, rtol=1e-5, atol=1e-6)

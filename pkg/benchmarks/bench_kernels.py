"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the median time of each backend and the
speedup. Both backends are checked for identical results first.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from prom import kernels
from prom.quant import quantize_activation_int8, quantize_pointwise_ternary, quantize_weight_int8


def _median_time(fn, repeat: int) -> float:
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def cases(g):
    x = quantize_activation_int8(g.standard_normal((8, 96, 16, 16)).astype(np.float32))
    pw = quantize_pointwise_ternary(g.standard_normal((192, 96, 1, 1)).astype(np.float32))
    dw = quantize_weight_int8(g.standard_normal((96, 1, 3, 3)).astype(np.float32))
    dense = quantize_weight_int8(g.standard_normal((32, 96, 3, 3)).astype(np.float32))
    xf = g.standard_normal((32, 96, 16, 16)).astype(np.float32)
    wf = g.standard_normal((96, 1, 3, 3)).astype(np.float32)
    dy = g.standard_normal((32, 96, 16, 16)).astype(np.float32)
    slope = np.full(96, 0.25, np.float32)
    return [
        ("pointwise ternary 96->192 @16x16 b8", lambda: kernels.pointwise_ternary_conv(x, pw)),
        ("depthwise int8 3x3 c96 @16x16 b8", lambda: kernels.conv2d_int8(x, dw, kernels.ConvParams(1, 1, 96))),
        ("dense int8 3x3 96->32 @16x16 b8", lambda: kernels.conv2d_int8(x, dense, kernels.ConvParams(1, 1, 1))),
        ("depthwise float fwd b32", lambda: kernels.depthwise_conv_float(xf, wf, 1, 1)),
        ("depthwise float bwd b32", lambda: kernels.depthwise_conv_float_backward(xf, wf, dy, 1, 1)),
        ("prelu fwd b32", lambda: kernels.prelu_float(xf, slope)),
        ("prelu bwd b32", lambda: kernels.prelu_float_backward(xf, slope, dy)),
    ]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if "c" not in kernels.available_backends():
        print("compiled extension not built; only the numpy backend is available")
        return 1
    g = np.random.default_rng(0)
    print(f"{'kernel':40s} {'numpy ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, fn in cases(g):
        with kernels.use_backend("python"):
            ref = fn()
            tp = _median_time(fn, args.repeat)
        with kernels.use_backend("c"):
            got = fn()
            tc = _median_time(fn, args.repeat)
        for a, b in zip(ref if isinstance(ref, tuple) else (ref,), got if isinstance(got, tuple) else (got,)):
            if a is not None and not np.allclose(a, b, rtol=1e-5, atol=1e-4):
                raise SystemExit(f"{name}: backends disagree")
        print(f"{name:40s} {tp * 1e3:10.2f} {tc * 1e3:12.2f} {tp / tc:8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

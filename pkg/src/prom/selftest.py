"""Self-checks run by ``prom selftest``: kernels against oracles, file
round-trips, the ternary initial distribution and cost calibration."""

from __future__ import annotations

import numpy as np

from prom import cost as costmod
from prom import kernels
from prom.arch import apply_prelu_swap, init_params, tiny_dsnet
from prom.engine import QuantizedModel, quantize_model, run_quantized
from prom.fileformat import ModelFormatError, load_model, pack_trits, save_model, unpack_trits
from prom.kernels.counting import CountingKernels, Counter
from prom.quant import dequantize, quantize_activation_int8, quantize_pointwise_ternary, quantize_weight_int8
from prom.quant import ternary_stats
from prom.tensor import he_normal_init

# reference totals for MobileNetV2 1.0x at 224x224 and the tolerance on each
REFERENCE = (
    ("float16", "energy", "45nm", 445.4, 0.03),
    ("prom", "energy", "45nm", 15.2, 0.10),
    ("float16", "energy", "7nm", 148.1, 0.03),
    ("prom", "energy", "7nm", 4.3, 0.10),
    ("float16", "size", None, 7.01, 0.02),
    ("prom", "size", None, 1.95, 0.05),
)


def check_kernels(n: int, seed: int = 0) -> tuple[bool, str]:
    g = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        B, C, O = g.integers(1, 3), g.integers(1, 9), g.integers(1, 9)
        H, W = g.integers(1, 7), g.integers(1, 7)
        x = quantize_activation_int8(g.standard_normal((B, C, H, W)).astype(np.float32))
        t = quantize_pointwise_ternary(g.standard_normal((O, C, 1, 1)).astype(np.float32))
        acc = kernels.pointwise_ternary_conv(x, t)
        ref = np.einsum("bchw,oc->bohw", x.values.astype(np.int32), t.trits[:, :, 0, 0].astype(np.int32))
        if not np.array_equal(acc, ref):
            return False, "ternary pointwise kernel differs from the int8 multiply oracle"
        K = int(g.choice([1, 3]))
        groups = int(g.choice([1, C]))
        wshape = (C if groups == C else O, C // groups, K, K)
        p = kernels.ConvParams(int(g.integers(1, 3)), K // 2, groups)
        wq = quantize_weight_int8(g.standard_normal(wshape).astype(np.float32))
        got = kernels.dequant_output(kernels.conv2d_int8(x, wq, p), wq.scale, x.scale, "int8", np.float64)
        want = kernels.conv2d_float(dequantize(x, np.float64), dequantize(wq, np.float64), p)
        scale = max(np.abs(want).max(), 1e-12)
        worst = max(worst, float(np.abs(got - want).max() / scale))
    if worst > 1e-4:
        return False, f"integer conv deviates from the float oracle by {worst:.2e} (relative)"
    counter = Counter()
    x = quantize_activation_int8(g.standard_normal((2, 16, 4, 4)).astype(np.float32))
    t = quantize_pointwise_ternary(g.standard_normal((8, 16, 1, 1)).astype(np.float32))
    with kernels.use_backend(CountingKernels(counter)):
        kernels.pointwise_ternary_conv(x, t)
    muls = counter.total("pw_ternary").muls
    if muls:
        return False, f"ternary pointwise kernel performed {muls} multiplications"
    return True, f"{n} random instances exact, int conv max rel err {worst:.1e}, 0 multiplications"


def check_roundtrip(seed: int = 0) -> tuple[bool, str]:
    g = np.random.default_rng(seed)
    for _ in range(200):
        t = g.integers(-1, 2, size=int(g.integers(0, 40))).astype(np.int8)
        if not np.array_equal(unpack_trits(pack_trits(t), t.size), t):
            return False, "trit packing round-trip failed"
    arch = apply_prelu_swap(tiny_dsnet())
    qm = quantize_model(arch, init_params(arch, seed)).to_half()
    blob = save_model(qm)
    x = g.standard_normal((4,) + arch.input_shape).astype(np.float32)
    if not np.array_equal(run_quantized(qm, x), run_quantized(load_model(blob), x)):
        return False, "logits changed across save/load"
    bad = bytearray(blob)
    bad[-10] ^= 0x01
    try:
        load_model(bytes(bad))
    except ModelFormatError:
        pass
    else:
        return False, "a corrupted payload byte was accepted"
    return True, f"trit packing and model file ({len(blob)} bytes) round-trip bit-exactly"


def check_distribution(seeds=(0, 1, 2, 3, 4)) -> tuple[bool, str]:
    fr = []
    for s in seeds:
        w = he_normal_init((1024, 1024, 1, 1), 1024, s)
        fr.append(ternary_stats(quantize_pointwise_ternary(w)))
    ok = all(abs(f["frac_zero"] - 0.31) <= 0.02 and abs(f["frac_pos"] - 0.345) <= 0.02
             and abs(f["frac_neg"] - 0.345) <= 0.02 for f in fr)
    z = np.mean([f["frac_zero"] for f in fr])
    return ok, f"zero fraction {z:.4f} over {len(seeds)} seeds"


def check_calibration(tables: dict | None = None) -> tuple[bool, str]:
    tabs = [(tables or {}).get(n) or costmod.default_table(n) for n in costmod.NODES]
    reports = {p: costmod.named_report("mobilenet_v2", 1.0, p, tabs) for p in ("float16", "prom")}
    bad, parts = [], []
    for policy, what, node, ref, tol in REFERENCE:
        r = reports[policy]
        v = r.total_energy(node) if what == "energy" else r.total_size
        parts.append(f"{policy} {what}{' ' + node if node else ''} {v:.2f}")
        if abs(v - ref) > tol * ref:
            bad.append(f"{policy} {what}{' ' + node if node else ''} {v:.2f} vs {ref} (tol {tol:.0%})")
    if bad:
        return False, "; ".join(bad)
    return True, ", ".join(parts)


def check_model(qm: QuantizedModel, seed: int = 0) -> tuple[bool, str]:
    x = np.random.default_rng(seed).standard_normal((2,) + tuple(qm.arch.input_shape)).astype(np.float32)
    y = run_quantized(qm, x)
    if not np.all(np.isfinite(y)):
        return False, "model produced non-finite logits"
    again = load_model(save_model(qm))
    if not np.array_equal(run_quantized(again, x), y):
        return False, "re-saving the model changed its outputs"
    return True, f"{qm.arch.name}: logits finite, re-save stable"


def run_all(tables: dict | None = None, model: QuantizedModel | None = None, quick: bool = False):
    checks = [
        ("kernels", lambda: check_kernels(100 if quick else 1000)),
        ("file format", check_roundtrip),
        ("initial ternary distribution", lambda: check_distribution((0,) if quick else (0, 1, 2, 3, 4))),
        ("cost calibration", lambda: check_calibration(tables)),
    ]
    if model is not None:
        checks.append(("model file", lambda: check_model(model)))
    out = []
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as e:  # a crashing check is a failed check
            ok, detail = False, f"{type(e).__name__}: {e}"
        out.append((name, ok, detail))
    return out

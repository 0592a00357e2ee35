"""Finite-difference helpers shared by the engine and acceptance tests."""

from __future__ import annotations

import contextlib

import numpy as np

import prom.engine as engine
from prom.arch import ArchSpec, LayerSpec, init_params
from prom.quant import fake_quant

H = 1e-5
RTOL = 1e-3
ATOL = 1e-8
KINK_MARGIN = 1e-3


def three_layer_net(policy: bool = False) -> ArchSpec:
    """dense conv, pointwise conv, linear; ``policy`` selects the mixed
    integer policies instead of all-float."""
    def pol(p):
        return p if policy else "float"
    layers = (
        LayerSpec("c1", "conv_dense", 3, 4, kernel=3, padding=1, quant_policy=pol("int8")),
        LayerSpec("bn1", "batchnorm", 4, 4),
        LayerSpec("a1", "activation", 4, 4, act="prelu"),
        LayerSpec("dw", "conv_depthwise", 4, 4, kernel=3, stride=2, padding=1, groups=4,
                  quant_policy=pol("int8")),
        LayerSpec("pw", "conv_pointwise", 4, 5, quant_policy=pol("ternary")),
        LayerSpec("bn2", "batchnorm", 5, 5),
        LayerSpec("a2", "activation", 5, 5, act="prelu"),
        LayerSpec("pool", "avgpool_global", 5, 5),
        LayerSpec("fc", "linear", 5, 3, quant_policy=pol("int8"), bias=True),
    )
    return ArchSpec("three_layer", layers, (3, 6, 6), num_classes=3).validate()


def float64_params(arch: ArchSpec, seed: int):
    g = np.random.default_rng(seed)
    params = init_params(arch, seed)
    for name, p in params.items():
        for k in list(p):
            p[k] = p[k].astype(np.float64)
        if "gamma" in p:
            p["gamma"] += 0.3 * g.standard_normal(p["gamma"].shape)
            p["beta"] += 0.3 * g.standard_normal(p["beta"].shape)
        if "slope" in p:
            p["slope"] += 0.1 * g.standard_normal(p["slope"].shape)
        if name == "fc":
            p["weight"] = g.standard_normal(p["weight"].shape)
            p["bias"] = 0.1 * g.standard_normal(p["bias"].shape)
    return params


def kink_distance(arch, params, x, mode):
    """Smallest |pre-activation| over all PReLU inputs."""
    _, tape = engine.forward(arch, params, x, mode, training=True, record=True)
    return min(np.abs(c["x"]).min() for l, c in zip(arch.layers, tape["steps"]) if l.kind == "activation")


def sample_problem(arch, mode="float", batch=4, start=0):
    """First seed whose PReLU inputs all sit at least KINK_MARGIN from 0."""
    for seed in range(start, start + 200):
        g = np.random.default_rng(seed)
        params = float64_params(arch, seed)
        x = g.standard_normal((batch,) + arch.input_shape)
        y = g.integers(0, arch.num_classes, batch)
        if kink_distance(arch, params, x, mode) > KINK_MARGIN:
            return params, x, y
    raise RuntimeError("no kink-free sample found")


def numeric_grads(loss_fn, params):
    """Central differences of ``loss_fn(params)`` for every trainable entry."""
    out = {}
    for name, p in params.items():
        for k, v in p.items():
            if k.startswith("running_"):
                continue
            g = np.zeros_like(v)
            for idx in np.ndindex(v.shape):
                old = v[idx]
                v[idx] = old + H
                lp = loss_fn(params)
                v[idx] = old - H
                lm = loss_fn(params)
                v[idx] = old
                g[idx] = (lp - lm) / (2 * H)
            out.setdefault(name, {})[k] = g
    return out


def worst_violation(analytic, numeric):
    """max over entries of |a - n| / (RTOL * max(|a|, |n|) + ATOL); <= 1 passes."""
    worst = 0.0
    for name, p in numeric.items():
        for k, n in p.items():
            a = analytic[name][k]
            r = np.abs(a - n) / (RTOL * np.maximum(np.abs(a), np.abs(n)) + ATOL)
            worst = max(worst, float(r.max()))
    return worst


@contextlib.contextmanager
def frozen_quantizers(offsets):
    """Replace the engine's quantizers: weights pass through unchanged and each
    activation quantizer adds its recorded constant offset, in call order."""
    calls = iter(offsets)

    def fq(x, kind, eps=None, per_channel=True):
        if kind == "int8_act":
            return x + next(calls)
        return x

    saved = engine.fake_quant
    engine.fake_quant = fq
    try:
        yield
    finally:
        engine.fake_quant = saved


@contextlib.contextmanager
def recording_quantizers():
    """Real quantizers that log (kind, input, output) for every call."""
    log = []

    def fq(x, kind, eps=engine.EPS, per_channel=True):
        y = fake_quant(x, kind, eps, per_channel)
        log.append((kind, x, y))
        return y

    saved = engine.fake_quant
    engine.fake_quant = fq
    try:
        yield log
    finally:
        engine.fake_quant = saved


def frozen_problem(arch, params, x, y):
    """The qat loss as a smooth function of the quantizer outputs.

    Returns ``(leaf_params, loss_fn)``: ``leaf_params`` holds the
    fake-quantized weights as free parameters, and ``loss_fn`` evaluates the
    network with activation quantizers frozen to their rounding offsets.
    """
    with recording_quantizers() as log:
        engine.forward(arch, params, x, "qat", training=True)
    offsets = [yq - xq for kind, xq, yq in log if kind == "int8_act"]
    wq = [yq for kind, _, yq in log if kind != "int8_act"]
    leaf = {n: {k: v.copy() for k, v in p.items()} for n, p in params.items()}
    quantized = [l for l in arch.layers if l.has_weight and l.quant_policy != "float"]
    for l, w in zip(quantized, wq):
        leaf[l.name]["weight"] = w.copy()

    def loss_fn(pr):
        with frozen_quantizers(offsets):
            logits = engine.forward(arch, pr, x, "qat", training=True)
        return engine.softmax_cross_entropy(logits, y)[0]

    def grads_fn(pr):
        with frozen_quantizers(offsets):
            return engine.loss_and_grads(arch, pr, x, y, "qat", training=True)

    return leaf, loss_fn, grads_fn

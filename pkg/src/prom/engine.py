"""Forward and reverse passes over an ``ArchSpec``.

Three forward modes share one layer walk:

* ``float``: raw master weights, no quantizers.
* ``qat``: every weight layer sees fake-quantized weights and a fake-quantized
  input, then runs a float convolution. Gradients pass straight through the
  quantizers; scales are constants of the forward pass.
* ``quantized_inference``: weights are quantized once, activations are
  quantized at every weight layer input, and the integer kernels run; outputs
  are rescaled after each layer.

BatchNorm, activations, pooling and residual adds always run in float.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from prom import kernels
from prom.arch import CONV_KINDS, ArchSpec, LayerSpec, check_params
from prom.quant import (
    EPS,
    Int8Tensor,
    TernaryTensor,
    fake_quant,
    quantize_activation_int8,
    quantize_ternary,
    quantize_weight_int8,
)
from prom.tensor import ShapeError

MODES = ("float", "qat", "quantized_inference")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class NonFiniteError(FloatingPointError):
    def __init__(self, layer: str, what: str = "activation"):
        super().__init__(f"non-finite {what} at layer {layer!r}")
        self.layer = layer
        self.what = what


@dataclass(frozen=True)
class QuantOptions:
    eps: float = EPS
    per_channel_pw: bool = True


# -- float building blocks -------------------------------------------------

def _chan_sum(a: np.ndarray) -> np.ndarray:
    """Sum over every axis except the channel axis (1)."""
    if a.ndim == 2:
        return a.sum(axis=0)
    return a.reshape(a.shape[0], a.shape[1], -1).sum(axis=2).sum(axis=0)


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _window(xp, kh, kw, s, ho, wo):
    return xp[:, :, kh:kh + s * (ho - 1) + 1:s, kw:kw + s * (wo - 1) + 1:s]


def conv_forward(l: LayerSpec, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    B, C, H, W = x.shape
    k, s, p = l.kernel, l.stride, l.padding
    Ho = (H + 2 * p - k) // s + 1
    Wo = (W + 2 * p - k) // s + 1
    if l.kind == "conv_pointwise":
        xs = x[:, :, ::s, ::s] if s > 1 else x
        y = np.matmul(w.reshape(l.out_ch, C), xs.reshape(B, C, -1))
        return y.reshape(B, l.out_ch, Ho, Wo)
    if l.kind == "conv_depthwise":
        return kernels.depthwise_conv_float(x, w, s, p)
    xp = _pad(x, p)
    if l.groups != 1:
        return kernels.conv2d_float(x, w, kernels.ConvParams(s, p, l.groups))
    y = np.zeros((B, l.out_ch, Ho * Wo), dtype=x.dtype)
    for kh in range(k):
        for kw in range(k):
            patch = _window(xp, kh, kw, s, Ho, Wo).reshape(B, C, -1)
            y += np.matmul(w[:, :, kh, kw], patch)
    return y.reshape(B, l.out_ch, Ho, Wo)


def conv_backward(l: LayerSpec, x, w, dy, need_dx=True):
    B, C, H, W = x.shape
    k, s, p = l.kernel, l.stride, l.padding
    _, O, Ho, Wo = dy.shape
    if l.kind == "conv_pointwise":
        xs = x[:, :, ::s, ::s] if s > 1 else x
        dyf = dy.reshape(B, O, -1)
        dw = np.tensordot(dyf, xs.reshape(B, C, -1), axes=([0, 2], [0, 2])).reshape(w.shape)
        dx = None
        if need_dx:
            dxs = np.matmul(w.reshape(O, C).T, dyf).reshape(B, C, Ho, Wo)
            if s > 1:
                dx = np.zeros_like(x)
                dx[:, :, ::s, ::s] = dxs
            else:
                dx = dxs
        return dx, dw.astype(w.dtype, copy=False)
    if l.kind == "conv_depthwise":
        return kernels.depthwise_conv_float_backward(x, w, dy, s, p, need_dx)
    if l.groups != 1:
        raise NotImplementedError("grouped dense convolution has no training path")
    xp = _pad(x, p)
    dxp = np.zeros_like(xp) if need_dx else None
    dw = np.zeros_like(w)
    for kh in range(k):
        for kw in range(k):
            patch = _window(xp, kh, kw, s, Ho, Wo)
            dyf = dy.reshape(B, O, -1)
            dw[:, :, kh, kw] = np.tensordot(dyf, patch.reshape(B, C, -1), axes=([0, 2], [0, 2]))
            if need_dx:
                _window(dxp, kh, kw, s, Ho, Wo)[...] += np.matmul(w[:, :, kh, kw].T, dyf).reshape(B, C, Ho, Wo)
    dx = None
    if need_dx:
        dx = dxp[:, :, p:p + H, p:p + W] if p else dxp
    return dx, dw


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray, smoothing: float = 0.0):
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    B, K = logits.shape
    target = np.full((B, K), smoothing / K, dtype=logits.dtype)
    target[np.arange(B), labels] += 1.0 - smoothing
    loss = float(-(target * logp).sum() / B)
    grad = (np.exp(logp) - target) / B
    return loss, grad.astype(logits.dtype, copy=False)


# -- quantization of a trained model ---------------------------------------

@dataclass
class QuantizedModel:
    """Fixed integer weights and folded float side parameters for inference."""

    arch: ArchSpec
    layers: dict[str, dict] = field(default_factory=dict)
    eps: float = EPS

    def to_half(self) -> "QuantizedModel":
        """Round every float side value (scales, BN affine, slopes, biases)
        to float16 precision, the precision used on disk."""
        def h(a):
            return np.asarray(a, np.float32).astype(np.float16).astype(np.float32)

        out = {}
        for name, entry in self.layers.items():
            e = {}
            for k, v in entry.items():
                if isinstance(v, TernaryTensor):
                    e[k] = TernaryTensor(v.trits, h(v.alpha))
                elif isinstance(v, Int8Tensor):
                    e[k] = Int8Tensor(v.values, h(v.scale), v.scale_kind)
                else:
                    e[k] = h(v)
            out[name] = e
        return QuantizedModel(self.arch, out, self.eps)


def quantize_weight(l: LayerSpec, w: np.ndarray, opts: QuantOptions):
    if l.quant_policy == "ternary":
        per_channel = opts.per_channel_pw or l.kind != "conv_pointwise"
        return quantize_ternary(w, opts.eps, per_channel)
    if l.quant_policy == "int8":
        return quantize_weight_int8(w, opts.eps)
    raise ValueError(f"{l.name}: policy {l.quant_policy!r} has no integer form")


def quantize_model(arch: ArchSpec, params, opts: QuantOptions = QuantOptions()) -> QuantizedModel:
    check_params(arch, params)
    qm = QuantizedModel(arch, eps=opts.eps)
    for l in arch.layers:
        p = params.get(l.name, {})
        if l.has_weight:
            if l.quant_policy == "float":
                entry = {"weight": np.asarray(p["weight"], np.float32)}
            else:
                entry = {"q": quantize_weight(l, np.asarray(p["weight"], np.float32), opts)}
            if l.bias:
                entry["bias"] = np.asarray(p["bias"], np.float32)
            qm.layers[l.name] = entry
        elif l.kind == "batchnorm":
            scale = (p["gamma"] / np.sqrt(p["running_var"] + np.float32(BN_EPS))).astype(np.float32)
            shift = (p["beta"] - p["running_mean"] * scale).astype(np.float32)
            qm.layers[l.name] = {"scale": scale, "shift": shift}
        elif l.kind == "activation" and l.act == "prelu":
            qm.layers[l.name] = {"slope": np.asarray(p["slope"], np.float32)}
    return qm


def _int_layer(l: LayerSpec, entry: dict, x: np.ndarray, eps: float) -> np.ndarray:
    if "weight" in entry:  # float-policy layer
        w = entry["weight"]
        y = x @ w.T if l.kind == "linear" else conv_forward(l, x, w)
    else:
        q = entry["q"]
        xq = quantize_activation_int8(x, eps)
        kind = "ternary" if isinstance(q, TernaryTensor) else "int8"
        if l.kind == "linear":
            acc = kernels.linear_int8(xq, q)
        elif l.kind == "conv_pointwise" and kind == "ternary":
            if l.stride > 1:
                xq = Int8Tensor(np.ascontiguousarray(xq.values[:, :, ::l.stride, ::l.stride]), xq.scale, xq.scale_kind)
            acc = kernels.pointwise_ternary_conv(xq, q)
        else:
            acc = kernels.conv2d_int8(xq, q, kernels.ConvParams(l.stride, l.padding, l.groups))
        scale = q.alpha if kind == "ternary" else q.scale
        y = kernels.dequant_output(acc, scale, xq.scale, kind)
    if "bias" in entry:
        y = y + entry["bias"]
    return y


def run_quantized(qm: QuantizedModel, x: np.ndarray) -> np.ndarray:
    """Integer-kernel inference over a quantized model."""
    arch = qm.arch
    x = np.asarray(x, np.float32)
    if x.shape[1:] != tuple(arch.input_shape):
        raise ShapeError(f"input {x.shape[1:]} does not match {tuple(arch.input_shape)}")
    outs = {"": x}
    for l in arch.layers:
        e = qm.layers.get(l.name, {})
        if l.has_weight:
            x = _int_layer(l, e, x, qm.eps)
        elif l.kind == "batchnorm":
            x = x * e["scale"][None, :, None, None] + e["shift"][None, :, None, None]
        elif l.kind == "activation":
            x = _act_forward(l, x, e.get("slope"))
        elif l.kind == "avgpool_global":
            x = x.mean(axis=(2, 3))
        elif l.kind == "residual_add":
            x = x + outs[l.skip]
        outs[l.name] = x
    return x


# -- training-capable forward/backward --------------------------------------

def _act_forward(l: LayerSpec, x, slope):
    if l.act == "relu6":
        y = np.maximum(x, 0)
        np.minimum(y, 6, out=y)
        return y
    return kernels.prelu_float(x, slope)


def _fq_weight(l: LayerSpec, w, opts: QuantOptions):
    if l.quant_policy == "ternary":
        if l.kind == "conv_pointwise":
            return fake_quant(w, "ternary_pw", opts.eps, opts.per_channel_pw)
        return fake_quant(w, "ternary", opts.eps)
    if l.quant_policy == "int8":
        return fake_quant(w, "int8_weight", opts.eps)
    return w


def forward(arch: ArchSpec, params, x: np.ndarray, mode: str = "float", *, training: bool = False,
            opts: QuantOptions = QuantOptions(), record: bool = False):
    """Run the network. Returns logits, or ``(logits, tape)`` with ``record``.

    ``training`` switches BatchNorm to batch statistics; the tape then carries
    the updated running statistics under ``tape["bn_stats"]``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1:] != tuple(arch.input_shape):
        raise ShapeError(f"input {x.shape} does not match N x {tuple(arch.input_shape)}")
    if mode == "quantized_inference":
        if training or record:
            raise ValueError("quantized inference has no training tape")
        return run_quantized(quantize_model(arch, params, opts), x)
    check_params(arch, params)
    dt = x.dtype
    qat = mode == "qat"
    steps = []
    bn_stats = {}
    outs = {"": x}
    for l in arch.layers:
        p = params.get(l.name, {})
        c: dict = {"x": x} if record else {}
        if l.has_weight:
            w = np.asarray(p["weight"], dt)
            if qat and l.quant_policy != "float":
                wq = _fq_weight(l, w, opts)
                xin = fake_quant(x, "int8_act", opts.eps)
            else:
                wq, xin = w, x
            if l.kind == "linear":
                y = xin @ wq.T
                if l.bias:
                    y = y + np.asarray(p["bias"], dt)
            else:
                y = conv_forward(l, xin, wq)
            if record:
                c.update(xin=xin, wq=wq)
        elif l.kind == "batchnorm":
            gamma = np.asarray(p["gamma"], dt)
            beta = np.asarray(p["beta"], dt)
            if training:
                n = x.shape[0] * x.shape[2] * x.shape[3]
                mean = _chan_sum(x) / n
                xc = x - mean[None, :, None, None]
                var = _chan_sum(xc * xc) / n
                unbiased = var * (n / max(n - 1, 1))
                bn_stats[l.name] = (
                    ((1 - BN_MOMENTUM) * p["running_mean"] + BN_MOMENTUM * mean).astype(np.float32),
                    ((1 - BN_MOMENTUM) * p["running_var"] + BN_MOMENTUM * unbiased).astype(np.float32),
                )
            else:
                mean = np.asarray(p["running_mean"], dt)
                var = np.asarray(p["running_var"], dt)
                xc = x - mean[None, :, None, None]
            inv = (1.0 / np.sqrt(var + dt.type(BN_EPS))).astype(dt)
            xhat = xc
            xhat *= inv[None, :, None, None]
            y = xhat * gamma[None, :, None, None]
            y += beta[None, :, None, None]
            if record:
                c.update(xhat=xhat, inv=inv, batch_stats=training)
        elif l.kind == "activation":
            y = _act_forward(l, x, np.asarray(p["slope"], dt) if l.act == "prelu" else None)
        elif l.kind == "avgpool_global":
            y = x.mean(axis=(2, 3))
        elif l.kind == "residual_add":
            y = x + outs[l.skip]
        outs[l.name] = y
        if record:
            steps.append(c)
        x = y
    if record:
        return x, {"steps": steps, "bn_stats": bn_stats, "mode": mode}
    return x


def backward_tape(arch: ArchSpec, params, tape, dlogits: np.ndarray):
    """Reverse pass. Returns ``(grads, ste)`` where ``grads[layer][param]``
    are gradients for trainable parameters and ``ste[layer]`` holds the
    gradients that reached each quantizer output (weight and input)."""
    grads: dict[str, dict[str, np.ndarray]] = {}
    ste: dict[str, dict[str, np.ndarray]] = {}
    pending: dict[str, np.ndarray] = {}
    qat = tape["mode"] == "qat"
    dy = dlogits
    first = arch.layers[0].name if arch.layers else ""
    for l, c in zip(reversed(arch.layers), reversed(tape["steps"])):
        if l.name in pending:
            dy = dy + pending.pop(l.name)
        p = params.get(l.name, {})
        x = c["x"]
        need_dx = l.name != first
        g: dict[str, np.ndarray] = {}
        if l.has_weight:
            xin, wq = c["xin"], c["wq"]
            if l.kind == "linear":
                dwq = dy.T @ xin
                dxin = dy @ wq
                if l.bias:
                    g["bias"] = dy.sum(axis=0)
            else:
                dxin, dwq = conv_backward(l, xin, wq, dy, need_dx)
            # straight-through: d(master) = d(quantized), d(x) = d(quantized x)
            g["weight"] = dwq
            if qat and l.quant_policy != "float":
                ste[l.name] = {"weight_q": dwq, "input_q": dxin}
            dx = dxin
        elif l.kind == "batchnorm":
            gamma = np.asarray(p["gamma"], dy.dtype)
            dx, g["gamma"], g["beta"] = kernels.batchnorm_float_backward(
                c["xhat"], dy, gamma * c["inv"], c["batch_stats"])
        elif l.kind == "activation":
            if l.act == "relu6":
                dx = dy * ((x > 0) & (x < 6))
            else:
                dx, g["slope"] = kernels.prelu_float_backward(x, np.asarray(p["slope"], dy.dtype), dy)
        elif l.kind == "avgpool_global":
            B, C, H, W = x.shape
            dx = np.broadcast_to((dy / (H * W))[:, :, None, None], (B, C, H, W)).copy()
        elif l.kind == "residual_add":
            pending[l.skip] = pending.get(l.skip, 0) + dy
            dx = dy
        if g:
            grads[l.name] = {k: v.astype(np.asarray(p[k]).dtype, copy=False) for k, v in g.items()}
        dy = dx
    return grads, ste


def _first_nonfinite(arch: ArchSpec, tape, logits) -> str:
    """Name of the first layer whose output is not finite."""
    steps = tape["steps"]
    for i, l in enumerate(arch.layers):
        out = steps[i + 1]["x"] if i + 1 < len(steps) else logits
        if not np.all(np.isfinite(out)):
            return l.name
    return arch.layers[-1].name if arch.layers else ""


def loss_and_grads(arch: ArchSpec, params, x, labels, mode: str = "qat", *, training: bool = True,
                   opts: QuantOptions = QuantOptions(), label_smoothing: float = 0.0):
    """Forward, softmax cross-entropy and reverse pass in one call.

    Returns ``(loss, grads, aux)``; ``aux`` carries logits, the quantizer-node
    gradients and updated BatchNorm statistics.
    """
    if mode == "quantized_inference":
        raise ValueError("cannot differentiate the integer inference path")
    logits, tape = forward(arch, params, x, mode, training=training, opts=opts, record=True)
    loss, dlogits = softmax_cross_entropy(logits, np.asarray(labels), label_smoothing)
    if not np.isfinite(loss):
        raise NonFiniteError(_first_nonfinite(arch, tape, logits), "loss")
    grads, ste = backward_tape(arch, params, tape, dlogits)
    for name, g in grads.items():
        for k, v in g.items():
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(name, f"gradient {k}")
    return loss, grads, {"logits": logits, "ste": ste, "bn_stats": tape["bn_stats"]}


def backward(arch: ArchSpec, params, batch, mode: str = "qat", **kw):
    """Gradients of the mean softmax cross-entropy of ``batch = (x, labels)``."""
    x, labels = batch
    _, grads, _ = loss_and_grads(arch, params, x, labels, mode, **kw)
    return grads


__all__ = [
    "CONV_KINDS",
    "MODES",
    "NonFiniteError",
    "QuantOptions",
    "QuantizedModel",
    "backward",
    "forward",
    "loss_and_grads",
    "quantize_model",
    "run_quantized",
    "softmax_cross_entropy",
]

"""Integer inference kernels and the float reference convolution.

The hot loops live in a compiled extension (``_ckernels``). When it is not
built, or ``PROM_KERNELS=python`` is set, the numpy implementations in
``_pykernels`` are used instead. Both produce identical int32 accumulators.
"""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass

import numpy as np

from prom.quant import Int8Tensor, TernaryTensor
from prom.tensor import ShapeError

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not compiled
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["c"] = _ckernels

ACC_LIMIT = 2**31 - 1


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def _initial_backend():
    choice = os.environ.get("PROM_KERNELS", "auto").lower()
    if choice == "auto":
        return _ckernels if _ckernels is not None else _pykernels
    if choice not in _BACKENDS:
        raise ImportError(f"PROM_KERNELS={choice!r} requested but available backends are {available_backends()}")
    return _BACKENDS[choice]


_active = _initial_backend()


def backend_name() -> str:
    if _active is _ckernels and _ckernels is not None:
        return "c"
    if _active is _pykernels:
        return "python"
    return getattr(_active, "name", type(_active).__name__)


def set_backend(backend) -> None:
    """Select ``"c"``, ``"python"`` or any object exposing the three raw kernels."""
    global _active
    if isinstance(backend, str):
        if backend not in _BACKENDS:
            raise ValueError(f"unknown kernel backend {backend!r}; available: {available_backends()}")
        backend = _BACKENDS[backend]
    _active = backend


@contextlib.contextmanager
def use_backend(backend):
    global _active
    prev = _active
    set_backend(backend)
    try:
        yield _active
    finally:
        _active = prev


@dataclass(frozen=True)
class ConvParams:
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ValueError(f"invalid conv params {self}")


def _out_size(n: int, k: int, p: ConvParams) -> int:
    out = (n + 2 * p.padding - k) // p.stride + 1
    if out < 1:
        raise ShapeError(f"kernel {k} does not fit input {n} with padding {p.padding}")
    return out


def _check_conv(xshape, wshape, p: ConvParams) -> None:
    if len(xshape) != 4 or len(wshape) != 4:
        raise ShapeError(f"conv expects 4-D input and weight, got {xshape} and {wshape}")
    C, O, CG = xshape[1], wshape[0], wshape[1]
    if C % p.groups or O % p.groups:
        raise ShapeError(f"groups={p.groups} must divide C_in={C} and C_out={O}")
    if CG * p.groups != C:
        raise ShapeError(f"weight expects {CG * p.groups} input channels, input has {C}")
    _out_size(xshape[2], wshape[2], p)
    _out_size(xshape[3], wshape[3], p)


def conv2d_float(x: np.ndarray, w: np.ndarray, p: ConvParams = ConvParams()) -> np.ndarray:
    """Grouped cross-correlation with zero padding and no bias."""
    x = np.asarray(x)
    w = np.asarray(w)
    _check_conv(x.shape, w.shape, p)
    B, C, H, W = x.shape
    O, CG, K, KW = w.shape
    G = p.groups
    Ho, Wo = _out_size(H, K, p), _out_size(W, KW, p)
    xp = np.pad(x, ((0, 0), (0, 0), (p.padding, p.padding), (p.padding, p.padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (K, KW), axis=(2, 3))
    win = win[:, :, ::p.stride, ::p.stride][:, :, :Ho, :Wo]  # B C Ho Wo K KW
    win = win.reshape(B, G, CG, Ho, Wo, K, KW)
    wg = w.reshape(G, O // G, CG, K, KW)
    out = np.einsum("bgchwij,gocij->bgohw", win, wg, optimize=True)
    return out.reshape(B, O, Ho, Wo).astype(x.dtype, copy=False)


def pointwise_ternary_conv(x: Int8Tensor, w: TernaryTensor) -> np.ndarray:
    """Multiplication-free 1x1 convolution: per output channel, add the input
    channels under +1 trits and subtract those under -1 trits."""
    xv, trits = x.values, w.trits
    if trits.ndim != 4 or trits.shape[2:] != (1, 1):
        raise ShapeError(f"ternary kernel must be 1x1, got {trits.shape}")
    if xv.ndim != 4 or xv.shape[1] != trits.shape[1]:
        raise ShapeError(f"input {xv.shape} does not match ternary weight {trits.shape}")
    if 128 * trits.shape[1] > ACC_LIMIT:
        raise ShapeError("fan-in too large for a 32-bit accumulator")
    B, C, H, W = xv.shape
    acc = _active.pw_ternary(
        np.ascontiguousarray(xv.reshape(B, C, H * W)),
        np.ascontiguousarray(trits.reshape(trits.shape[0], C)),
    )
    return np.asarray(acc).reshape(B, -1, H, W)


def conv2d_int8(x: Int8Tensor, w: Int8Tensor | TernaryTensor, p: ConvParams = ConvParams()) -> np.ndarray:
    """Exact integer cross-correlation; covers depthwise (groups=C) and dense."""
    xv = x.values
    wv = w.trits if isinstance(w, TernaryTensor) else w.values
    _check_conv(xv.shape, wv.shape, p)
    fan_in = wv.shape[1] * wv.shape[2] * wv.shape[3]
    if 128 * 128 * fan_in > ACC_LIMIT:
        raise ShapeError(f"fan-in {fan_in} can overflow a 32-bit accumulator")
    acc = _active.conv_int8(np.ascontiguousarray(xv), np.ascontiguousarray(wv), p.stride, p.padding, p.groups)
    return np.asarray(acc)


def linear_int8(x: Int8Tensor, w: Int8Tensor) -> np.ndarray:
    xv, wv = x.values, w.values
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"linear expects B x C and O x C, got {xv.shape} and {wv.shape}")
    if 128 * 128 * wv.shape[1] > ACC_LIMIT:
        raise ShapeError(f"fan-in {wv.shape[1]} can overflow a 32-bit accumulator")
    return np.asarray(_active.linear_int8(np.ascontiguousarray(xv), np.ascontiguousarray(wv)))


def dequant_output(acc: np.ndarray, weight_scale, act_scale, kind: str, dtype=np.float32) -> np.ndarray:
    """Rescale an int32 accumulator to real units.

    ternary: ``acc * alpha_o * gamma_b / 127``; int8: ``acc * (beta_o / 127) * (gamma_b / 127)``.
    """
    acc = np.asarray(acc)
    ws = np.asarray(weight_scale, dtype=dtype)
    gs = np.asarray(act_scale, dtype=dtype)
    if acc.ndim < 2 or ws.shape != (acc.shape[1],) or gs.shape != (acc.shape[0],):
        raise ShapeError(f"scales {ws.shape}/{gs.shape} do not match accumulator {acc.shape}")
    tail = (1,) * (acc.ndim - 2)
    if kind == "ternary":
        wstep = ws
    elif kind == "int8":
        wstep = ws / dtype(127.0)
    else:
        raise ValueError(f"unknown dequant kind {kind!r}")
    astep = gs / dtype(127.0)
    return acc.astype(dtype) * wstep.reshape((1, -1) + tail) * astep.reshape((-1, 1) + tail)


def _float_impl():
    return _active if hasattr(_active, "dw_float") else _pykernels


def depthwise_conv_float(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Float depthwise forward used by training; ``w`` is C x 1 x K x K."""
    C, _, K, _ = w.shape
    return np.asarray(_float_impl().dw_float(np.ascontiguousarray(x), np.ascontiguousarray(w.reshape(C, K * K)),
                                             K, stride, pad))


def depthwise_conv_float_backward(x, w, dy, stride: int, pad: int, need_dx: bool = True):
    """Gradients ``(dx, dw)`` of the float depthwise convolution."""
    C, _, K, _ = w.shape
    dx, dw = _float_impl().dw_float_backward(
        np.ascontiguousarray(x), np.ascontiguousarray(w.reshape(C, K * K)),
        np.ascontiguousarray(dy, dtype=x.dtype), K, stride, pad, bool(need_dx))
    return (np.asarray(dx) if need_dx else None), np.asarray(dw).reshape(w.shape)


def prelu_float(x: np.ndarray, slope: np.ndarray) -> np.ndarray:
    """Per-channel PReLU on an N x C x H x W float tensor."""
    return np.asarray(_float_impl().prelu_float(np.ascontiguousarray(x), np.ascontiguousarray(slope, x.dtype)))


def prelu_float_backward(x, slope, dy):
    """``(dx, dslope)``; at x == 0 the identity branch is used."""
    dx, ds = _float_impl().prelu_float_backward(
        np.ascontiguousarray(x), np.ascontiguousarray(slope, x.dtype), np.ascontiguousarray(dy, x.dtype))
    return np.asarray(dx), np.asarray(ds)


def batchnorm_float_backward(xhat, dy, scale, batch_stats: bool):
    """``(dx, dgamma, dbeta)``. ``scale`` is gamma / sqrt(var + eps)."""
    dx, dg, db = _float_impl().bn_float_backward(
        np.ascontiguousarray(xhat), np.ascontiguousarray(dy, xhat.dtype),
        np.ascontiguousarray(scale, xhat.dtype), bool(batch_stats))
    return np.asarray(dx), np.asarray(dg), np.asarray(db)


__all__ = [
    "batchnorm_float_backward",
    "depthwise_conv_float",
    "depthwise_conv_float_backward",
    "prelu_float",
    "prelu_float_backward",
    "ConvParams",
    "available_backends",
    "backend_name",
    "conv2d_float",
    "conv2d_int8",
    "dequant_output",
    "linear_int8",
    "pointwise_ternary_conv",
    "set_backend",
    "use_backend",
]

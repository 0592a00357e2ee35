"""Quantizers: ternary absmean for pointwise weights, int8 absmax for the
remaining weights and for activations, and their inverses.

Scales are stored as physical magnitudes (alpha = mean |W|, beta = max |W|,
gamma = max |X|). Quantization multiplies by ``127 / (scale + eps)`` and
dequantization by ``scale / 127``, so an all-zero channel keeps a zero scale
instead of an infinite inverse. Rounding is half-to-even everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS = 1e-5
INT8_MIN, INT8_MAX = -128, 127


def roundclip(x: float, a: int, b: int) -> int:
    """``max(a, min(b, round(x)))`` with round-half-to-even."""
    if a > b:
        raise ValueError(f"empty range [{a}, {b}]")
    return max(a, min(b, round(x)))


def _roundclip(x: np.ndarray, a: int, b: int) -> np.ndarray:
    q = np.rint(x)
    np.maximum(q, a, out=q)
    np.minimum(q, b, out=q)
    return q


@dataclass(frozen=True, eq=False)
class TernaryTensor:
    """Trit plane plus per-output-channel scale ``alpha``.

    ``trits`` has the full weight shape (C_out x C_in x K x K); ``alpha`` has
    length C_out. With per-tensor scaling every entry of ``alpha`` is equal.
    """

    trits: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        if self.trits.dtype != np.int8:
            raise TypeError("trits must be int8")
        if self.alpha.shape != (self.trits.shape[0],):
            raise ValueError(f"alpha shape {self.alpha.shape} does not match {self.trits.shape[0]} channels")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.trits.shape


@dataclass(frozen=True, eq=False)
class Int8Tensor:
    """Signed 8-bit values plus a positive scale per channel or per batch element."""

    values: np.ndarray
    scale: np.ndarray
    scale_kind: str = "per_channel"

    def __post_init__(self):
        if self.values.dtype != np.int8:
            raise TypeError("values must be int8")
        if self.scale_kind not in ("per_channel", "per_batch_element"):
            raise ValueError(f"unknown scale kind {self.scale_kind!r}")
        if self.scale.shape != (self.values.shape[0],):
            raise ValueError(f"scale shape {self.scale.shape} does not match leading dim {self.values.shape[0]}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


def _flat_rows(w: np.ndarray) -> np.ndarray:
    return np.abs(w.reshape(w.shape[0], -1))


def _expand(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (ndim - 1))


def quantize_ternary(w: np.ndarray, eps: float = EPS, per_channel: bool = True) -> TernaryTensor:
    """Absmean ternarization of any weight tensor, scale per output channel."""
    w = np.asarray(w)
    if per_channel:
        alpha = _flat_rows(w).mean(axis=1)
    else:
        alpha = np.full(w.shape[0], np.abs(w).mean(), dtype=w.dtype)
    alpha = alpha.astype(w.dtype)
    q = _roundclip(w / (_expand(alpha, w.ndim) + w.dtype.type(eps)), -1, 1)
    return TernaryTensor(q.astype(np.int8), alpha)


def quantize_pointwise_ternary(w: np.ndarray, eps: float = EPS, per_channel: bool = True) -> TernaryTensor:
    w = np.asarray(w)
    if w.ndim != 4 or w.shape[2:] != (1, 1):
        raise ValueError(f"pointwise weight must be C_out x C_in x 1 x 1, got {w.shape}")
    return quantize_ternary(w, eps, per_channel)


def _absmax_int8(x: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    scale = _flat_rows(x).max(axis=1).astype(x.dtype)
    inv = x.dtype.type(127.0) / (scale + x.dtype.type(eps))
    q = _roundclip(x * _expand(inv, x.ndim), INT8_MIN, INT8_MAX)
    return q.astype(np.int8), scale


def quantize_weight_int8(w: np.ndarray, eps: float = EPS) -> Int8Tensor:
    """Channel-wise absmax int8 for depthwise, dense and linear weights."""
    w = np.asarray(w)
    q, beta = _absmax_int8(w, eps)
    return Int8Tensor(q, beta, "per_channel")


def quantize_activation_int8(x: np.ndarray, eps: float = EPS) -> Int8Tensor:
    """Absmax int8 with one scale per batch element (leading axis)."""
    x = np.asarray(x)
    q, gamma = _absmax_int8(x, eps)
    return Int8Tensor(q, gamma, "per_batch_element")


def dequantize(q: TernaryTensor | Int8Tensor, dtype=np.float32) -> np.ndarray:
    if isinstance(q, TernaryTensor):
        return q.trits.astype(dtype) * _expand(q.alpha.astype(dtype), q.trits.ndim)
    if isinstance(q, Int8Tensor):
        step = q.scale.astype(dtype) / dtype(127.0)
        return q.values.astype(dtype) * _expand(step, q.values.ndim)
    raise TypeError(f"cannot dequantize {type(q).__name__}")


FAKE_QUANT_KINDS = ("ternary_pw", "ternary", "int8_weight", "int8_act")


def fake_quant(x: np.ndarray, kind: str, eps: float = EPS, per_channel: bool = True) -> np.ndarray:
    """Quantize then dequantize, keeping the dtype of ``x``.

    Equal to ``dequantize(quantize_*(x))`` bit for bit; the integer grid is
    kept in float so no int8 copy is materialized.
    """
    x = np.asarray(x)
    dt = x.dtype.type
    if kind in ("ternary_pw", "ternary"):
        if kind == "ternary_pw" and (x.ndim != 4 or x.shape[2:] != (1, 1)):
            raise ValueError(f"pointwise weight must be C_out x C_in x 1 x 1, got {x.shape}")
        if per_channel:
            alpha = _flat_rows(x).mean(axis=1).astype(x.dtype)
        else:
            alpha = np.full(x.shape[0], np.abs(x).mean(), dtype=x.dtype)
        q = _roundclip(x / (_expand(alpha, x.ndim) + dt(eps)), -1, 1)
        q *= _expand(alpha, x.ndim)
        return q
    if kind in ("int8_weight", "int8_act"):
        scale = _flat_rows(x).max(axis=1).astype(x.dtype)
        inv = dt(127.0) / (scale + dt(eps))
        q = _roundclip(x * _expand(inv, x.ndim), INT8_MIN, INT8_MAX)
        q *= _expand(scale / dt(127.0), x.ndim)
        return q
    raise ValueError(f"unknown fake-quant kind {kind!r}; expected one of {FAKE_QUANT_KINDS}")


def ternary_stats(t: TernaryTensor | np.ndarray) -> dict[str, float]:
    """Fractions of -1, 0 and +1 over all trits."""
    trits = t.trits if isinstance(t, TernaryTensor) else np.asarray(t)
    n = trits.size
    if n == 0:
        raise ValueError("ternary_stats of an empty tensor")
    neg = int(np.count_nonzero(trits == -1))
    pos = int(np.count_nonzero(trits == 1))
    return {"frac_neg": neg / n, "frac_zero": (n - neg - pos) / n, "frac_pos": pos / n}

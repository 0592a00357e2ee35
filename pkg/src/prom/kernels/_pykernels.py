"""Pure-numpy integer kernels, used when the compiled extension is missing."""

from __future__ import annotations

import numpy as np


def pw_ternary(x: np.ndarray, trits: np.ndarray) -> np.ndarray:
    """x: B x C x P int8, trits: O x C -> int32 B x O x P.

    Each output row is a sum of selected input rows minus another selection;
    no multiplication touches the activations.
    """
    B, _, P = x.shape
    O = trits.shape[0]
    xi = x.astype(np.int32)
    out = np.zeros((B, O, P), dtype=np.int32)
    for o in range(O):
        row = trits[o]
        pos = np.flatnonzero(row == 1)
        neg = np.flatnonzero(row == -1)
        if pos.size:
            out[:, o] += xi[:, pos].sum(axis=1, dtype=np.int32)
        if neg.size:
            out[:, o] -= xi[:, neg].sum(axis=1, dtype=np.int32)
    return out


def conv_int8(x: np.ndarray, w: np.ndarray, stride: int, pad: int, groups: int) -> np.ndarray:
    B, C, H, W = x.shape
    O, CG, K, KW = w.shape
    Ho = (H + 2 * pad - K) // stride + 1
    Wo = (W + 2 * pad - KW) // stride + 1
    xp = np.pad(x.astype(np.int32), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    wi = w.astype(np.int32)
    OG = O // groups
    out = np.zeros((B, O, Ho, Wo), dtype=np.int32)
    depthwise = CG == 1 and OG == 1
    wg = wi.reshape(groups, OG, CG, K, KW)
    for kh in range(K):
        for kw in range(KW):
            patch = xp[:, :, kh:kh + stride * (Ho - 1) + 1:stride, kw:kw + stride * (Wo - 1) + 1:stride]
            if depthwise:
                out += patch * wi[:, 0, kh, kw][None, :, None, None]
            else:
                pg = patch.reshape(B, groups, CG, Ho, Wo)
                out += np.einsum("bgchw,goc->bgohw", pg, wg[:, :, :, kh, kw]).reshape(B, O, Ho, Wo)
    return out


def linear_int8(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return x.astype(np.int32) @ w.astype(np.int32).T


def _window(xp, kh, kw, s, ho, wo):
    return xp[:, :, kh:kh + s * (ho - 1) + 1:s, kw:kw + s * (wo - 1) + 1:s]


def dw_float(x, w, K, stride, pad):
    """Float depthwise forward. w: C x (K*K)."""
    B, C, H, W = x.shape
    Ho = (H + 2 * pad - K) // stride + 1
    Wo = (W + 2 * pad - K) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    y = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
    for kh in range(K):
        for kw in range(K):
            y += _window(xp, kh, kw, stride, Ho, Wo) * w[:, kh * K + kw][None, :, None, None]
    return y


def dw_float_backward(x, w, dy, K, stride, pad, need_dx):
    B, C, H, W = x.shape
    Ho, Wo = dy.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dxp = np.zeros_like(xp)
    dw = np.zeros((C, K * K), dtype=x.dtype)
    for kh in range(K):
        for kw in range(K):
            dw[:, kh * K + kw] = np.einsum("bchw,bchw->c", dy, _window(xp, kh, kw, stride, Ho, Wo))
            if need_dx:
                _window(dxp, kh, kw, stride, Ho, Wo)[...] += dy * w[:, kh * K + kw][None, :, None, None]
    return dxp[:, :, pad:pad + H, pad:pad + W], dw


def prelu_float(x, slope):
    return np.where(x < 0, x * slope[None, :, None, None], x)


def prelu_float_backward(x, slope, dy):
    xneg = np.minimum(x, 0)
    xneg *= dy
    ds = xneg.sum(axis=(0, 2, 3), dtype=np.float64).astype(x.dtype)
    dx = np.where(x < 0, slope[None, :, None, None], x.dtype.type(1))
    dx *= dy
    return dx, ds


def bn_float_backward(xhat, dy, scale, batch_stats):
    db = dy.sum(axis=(0, 2, 3), dtype=np.float64)
    dg = (dy * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
    if batch_stats:
        m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
        dx = xhat * (dg / m).astype(xhat.dtype)[None, :, None, None]
        np.subtract(dy, dx, out=dx)
        dx -= (db / m).astype(xhat.dtype)[None, :, None, None]
    else:
        dx = dy.copy()
    dx *= scale[None, :, None, None]
    return dx, dg.astype(xhat.dtype), db.astype(xhat.dtype)

"""Dense tensor substrate.

Tensors are plain numpy arrays in row-major N x C x H x W order (out x in for
2-D weights). Float tensors are ``float32`` unless a caller deliberately passes
``float64`` (the gradient checks do), integer accumulators are ``int32``.

Random normals come from numpy's ``Generator`` over the PCG64 bit generator,
whose ``standard_normal`` uses the ziggurat method. A given seed therefore
reproduces the same tensor bit for bit on every platform numpy supports.
"""

from __future__ import annotations

import numpy as np

FLOAT = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def check_shape(dims) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if not dims or any(d < 1 for d in dims):
        raise ShapeError(f"every dimension must be >= 1, got {dims}")
    return dims


def rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def he_normal_init(shape, fan: int, seed: int) -> np.ndarray:
    """Draw i.i.d. samples from N(0, 2/fan) as float32."""
    if fan < 1:
        raise ValueError(f"fan must be >= 1, got {fan}")
    dims = check_shape(shape)
    std = np.sqrt(2.0 / fan)
    return (rng(seed).standard_normal(dims) * std).astype(FLOAT)


def _channel_vec(v, x: np.ndarray, name: str) -> np.ndarray:
    """Reshape a per-channel vector so it broadcasts over axis 1 of ``x``."""
    v = np.asarray(v, dtype=x.dtype)
    if v.ndim == 0:
        return v
    if x.ndim < 2 or v.shape != (x.shape[1],):
        raise ShapeError(f"{name}: expected {x.shape[1:2]} per-channel values, got {v.shape}")
    return v.reshape((1, -1) + (1,) * (x.ndim - 2))


def _broadcast_pair(x: np.ndarray, y) -> np.ndarray:
    y = np.asarray(y, dtype=x.dtype)
    if y.shape == x.shape or y.ndim == 0:
        return y
    if y.ndim == 1:
        return _channel_vec(y, x, "operand")
    try:
        np.broadcast_shapes(x.shape, y.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {y.shape} against {x.shape}") from exc
    if np.broadcast_shapes(x.shape, y.shape) != x.shape:
        raise ShapeError(f"cannot broadcast {y.shape} against {x.shape}")
    return y


def add(x, y):
    return x + _broadcast_pair(x, y)


def sub(x, y):
    return x - _broadcast_pair(x, y)


def mul(x, y):
    return x * _broadcast_pair(x, y)


def relu6(x: np.ndarray) -> np.ndarray:
    return np.minimum(np.maximum(x, 0), 6).astype(x.dtype, copy=False)


def prelu(x: np.ndarray, slope) -> np.ndarray:
    """``x`` where positive, ``slope_c * x`` otherwise; slope is per channel."""
    s = _channel_vec(slope, x, "prelu slope")
    return np.where(x > 0, x, s * x)


def batchnorm(x: np.ndarray, mean, var, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    mean = _channel_vec(mean, x, "mean")
    var = _channel_vec(var, x, "var")
    gamma = _channel_vec(gamma, x, "gamma")
    beta = _channel_vec(beta, x, "beta")
    return gamma * (x - mean) / np.sqrt(var + x.dtype.type(eps)) + beta


_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu6": relu6,
    "prelu": prelu,
    "batchnorm": batchnorm,
}


def elementwise(op: str, x: np.ndarray, *args, **kwargs) -> np.ndarray:
    """Dispatch one of the named elementwise float operations."""
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(np.asarray(x), *args, **kwargs)

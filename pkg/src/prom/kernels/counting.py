"""Operation-counting shadow kernels.

These reimplement the integer kernels on top of a tiny arithmetic facade that
tallies every elementwise add and multiply it performs. Results match the
real kernels exactly, so the tallies audit which operations a kernel needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OpTally:
    kernel: str
    adds: int = 0
    muls: int = 0


@dataclass
class Counter:
    records: list[OpTally] = field(default_factory=list)

    def open(self, kernel: str) -> OpTally:
        rec = OpTally(kernel)
        self.records.append(rec)
        return rec

    def total(self, kernel: str | None = None) -> OpTally:
        out = OpTally(kernel or "all")
        for r in self.records:
            if kernel is None or r.kernel == kernel:
                out.adds += r.adds
                out.muls += r.muls
        return out


class _Arith:
    def __init__(self, tally: OpTally):
        self.tally = tally

    def add(self, a, b):
        r = np.add(a, b, dtype=np.int32)
        self.tally.adds += r.size
        return r

    def sub(self, a, b):
        r = np.subtract(a, b, dtype=np.int32)
        self.tally.adds += r.size
        return r

    def mul(self, a, b):
        r = np.multiply(a, b, dtype=np.int32)
        self.tally.muls += r.size
        return r


class CountingKernels:
    """Drop-in backend whose calls are logged into ``counter``."""

    name = "counting"

    def __init__(self, counter: Counter | None = None):
        self.counter = counter or Counter()

    def pw_ternary(self, x: np.ndarray, trits: np.ndarray) -> np.ndarray:
        ar = _Arith(self.counter.open("pw_ternary"))
        B, _, P = x.shape
        xi = x.astype(np.int32)
        out = np.zeros((B, trits.shape[0], P), dtype=np.int32)
        for o, row in enumerate(trits):
            acc = out[:, o]
            for i in np.flatnonzero(row == 1):
                acc = ar.add(acc, xi[:, i])
            for i in np.flatnonzero(row == -1):
                acc = ar.sub(acc, xi[:, i])
            out[:, o] = acc
        return out

    def conv_int8(self, x, w, stride, pad, groups):
        ar = _Arith(self.counter.open("conv_int8"))
        B, C, H, W = x.shape
        O, CG, K, KW = w.shape
        Ho = (H + 2 * pad - K) // stride + 1
        Wo = (W + 2 * pad - KW) // stride + 1
        xp = np.pad(x.astype(np.int32), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        OG = O // groups
        out = np.zeros((B, O, Ho, Wo), dtype=np.int32)
        ochan = np.arange(O)
        for ci in range(CG):
            cin = (ochan // OG) * CG + ci
            for kh in range(K):
                for kw in range(KW):
                    patch = xp[:, cin, kh:kh + stride * (Ho - 1) + 1:stride, kw:kw + stride * (Wo - 1) + 1:stride]
                    prod = ar.mul(patch, w[:, ci, kh, kw].astype(np.int32)[None, :, None, None])
                    out = ar.add(out, prod)
        return out

    def linear_int8(self, x, w):
        ar = _Arith(self.counter.open("linear_int8"))
        xi = x.astype(np.int32)
        wi = w.astype(np.int32)
        out = np.zeros((x.shape[0], w.shape[0]), dtype=np.int32)
        for c in range(x.shape[1]):
            out = ar.add(out, ar.mul(xi[:, c:c + 1], wi[None, :, c]))
        return out

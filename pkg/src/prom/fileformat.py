"""Binary model files for quantized networks.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic  b"PROM"
    4       2     format version (uint16)
    6       2     reserved, zero
    8       4     manifest length M (uint32)
    12      4     CRC32 of the manifest bytes
    16      M     manifest, UTF-8 JSON
    16+M    ...   blobs, each followed by the CRC32 of its bytes (uint32)

Blob offsets in the manifest are relative to the end of the manifest. Trit
planes are packed five trits per byte in base 3 (digit = trit + 1, least
significant digit first), int8 blocks are raw bytes, and every float side
value (scales, folded BatchNorm, PReLU slopes, biases) is float16.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib

import numpy as np

from prom.arch import ArchSpec
from prom.engine import QuantizedModel
from prom.quant import Int8Tensor, TernaryTensor

MAGIC = b"PROM"
VERSION = 1
_HEADER = struct.Struct("<4sHHII")
_CRC = struct.Struct("<I")
_POW3 = np.array([1, 3, 9, 27, 81], dtype=np.int32)
MAX_PACKED = 242


class ModelFormatError(ValueError):
    code = "format"


class ChecksumError(ModelFormatError):
    code = "checksum"


class VersionError(ModelFormatError):
    code = "version"


class TruncatedError(ModelFormatError):
    code = "truncated"


class CorruptError(ModelFormatError):
    code = "corrupt"


def pack_trits(trits) -> bytes:
    t = np.asarray(trits).ravel()
    if t.size == 0:
        return b""
    if t.min() < -1 or t.max() > 1:
        raise ValueError("trits must lie in {-1, 0, 1}")
    digits = (t.astype(np.int32) + 1)
    pad = (-digits.size) % 5
    if pad:
        # padding digit 1 encodes trit 0
        digits = np.concatenate([digits, np.ones(pad, np.int32)])
    return (digits.reshape(-1, 5) @ _POW3).astype(np.uint8).tobytes()


def unpack_trits(data: bytes, count: int) -> np.ndarray:
    b = np.frombuffer(data, dtype=np.uint8).astype(np.int32)
    if b.size and b.max() > MAX_PACKED:
        raise CorruptError(f"packed trit byte {int(b.max())} exceeds {MAX_PACKED}")
    if count > 5 * b.size or count < 0:
        raise TruncatedError(f"{b.size} packed bytes cannot hold {count} trits")
    digits = (b[:, None] // _POW3[None, :]) % 3
    return (digits.ravel()[:count] - 1).astype(np.int8)


def packed_len(count: int) -> int:
    return -(-count // 5)


def _half(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f2").tobytes()


def _tensors(qm: QuantizedModel):
    """(layer, key, value) in a fixed order."""
    for l in qm.arch.layers:
        entry = qm.layers.get(l.name)
        if not entry:
            continue
        for key in sorted(entry):
            yield l.name, key, entry[key]


def save_model(qm: QuantizedModel) -> bytes:
    """Serialize a quantized model. Float side values are stored as float16."""
    directory = []
    blobs = bytearray()

    def put(layer, key, dtype, shape, payload, **extra):
        directory.append({"layer": layer, "key": key, "dtype": dtype, "shape": list(shape),
                          "offset": len(blobs), "length": len(payload), **extra})
        blobs.extend(payload)
        blobs.extend(_CRC.pack(zlib.crc32(payload)))

    for layer, key, v in _tensors(qm):
        if isinstance(v, TernaryTensor):
            put(layer, key + ".trits", "trit5", v.trits.shape, pack_trits(v.trits))
            put(layer, key + ".alpha", "float16", v.alpha.shape, _half(v.alpha))
        elif isinstance(v, Int8Tensor):
            put(layer, key + ".values", "int8", v.values.shape, np.ascontiguousarray(v.values).tobytes(),
                scale_kind=v.scale_kind)
            put(layer, key + ".scale", "float16", v.scale.shape, _half(v.scale))
        else:
            a = np.asarray(v)
            put(layer, key, "float16", a.shape, _half(a))
    manifest = json.dumps({"arch": qm.arch.to_dict(), "eps": qm.eps, "tensors": directory},
                          sort_keys=True, separators=(",", ":")).encode()
    header = _HEADER.pack(MAGIC, VERSION, 0, len(manifest), zlib.crc32(manifest))
    return header + manifest + bytes(blobs)


_POLICY_DTYPE = {"ternary": "trit5", "int8": "int8"}


def load_model(data: bytes) -> QuantizedModel:
    data = bytes(data)
    if len(data) < _HEADER.size:
        raise TruncatedError(f"file is {len(data)} bytes, shorter than the header")
    magic, version, reserved, mlen, mcrc = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported format version {version}; this build reads version {VERSION}")
    if reserved:
        raise CorruptError("reserved header field is not zero")
    start = _HEADER.size
    if len(data) < start + mlen:
        raise TruncatedError("file ends inside the manifest")
    mbytes = data[start:start + mlen]
    if zlib.crc32(mbytes) != mcrc:
        raise ChecksumError("manifest checksum mismatch")
    try:
        manifest = json.loads(mbytes)
        arch = ArchSpec.from_dict(manifest["arch"])
        eps = float(manifest["eps"])
        directory = manifest["tensors"]
    except (ValueError, KeyError, TypeError) as e:
        raise CorruptError(f"invalid manifest: {e}") from e
    base = start + mlen
    raw: dict[tuple[str, str], tuple[dict, bytes]] = {}
    spans = []
    for d in directory:
        off, n = int(d["offset"]), int(d["length"])
        if off < 0 or n < 0:
            raise CorruptError(f"negative extent for {d['layer']}.{d['key']}")
        lo, hi = base + off, base + off + n
        if len(data) < hi + _CRC.size:
            raise TruncatedError(f"file ends inside tensor {d['layer']}.{d['key']}")
        payload = data[lo:hi]
        if zlib.crc32(payload) != _CRC.unpack_from(data, hi)[0]:
            raise ChecksumError(f"checksum mismatch in tensor {d['layer']}.{d['key']}")
        spans.append((off, off + n + _CRC.size))
        raw[(d["layer"], d["key"])] = (d, payload)
    spans.sort()
    for (a0, a1), (b0, _) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CorruptError("overlapping tensor extents")
    end = base + (spans[-1][1] if spans else 0)
    if len(data) != end:
        raise CorruptError(f"{len(data) - end} trailing bytes after the last tensor")
    return QuantizedModel(arch, _rebuild(arch, raw), eps)


def _decode(d: dict, payload: bytes) -> np.ndarray:
    shape = tuple(int(s) for s in d["shape"])
    count = int(np.prod(shape, dtype=np.int64))
    kind = d["dtype"]
    if kind == "trit5":
        if len(payload) != packed_len(count):
            raise CorruptError(f"{d['layer']}.{d['key']}: {len(payload)} bytes for {count} trits")
        return unpack_trits(payload, count).reshape(shape)
    width = {"int8": 1, "float16": 2}.get(kind)
    if width is None:
        raise CorruptError(f"unknown tensor dtype {kind!r}")
    if len(payload) != count * width:
        raise CorruptError(f"{d['layer']}.{d['key']}: {len(payload)} bytes for {count} {kind} values")
    if kind == "int8":
        return np.frombuffer(payload, dtype=np.int8).reshape(shape).copy()
    return np.frombuffer(payload, dtype="<f2").astype(np.float32).reshape(shape)


def _rebuild(arch: ArchSpec, raw) -> dict:
    layers: dict[str, dict] = {}
    used = set()

    def take(layer, key):
        if (layer, key) not in raw:
            raise CorruptError(f"missing tensor {layer}.{key}")
        used.add((layer, key))
        d, payload = raw[(layer, key)]
        return d, _decode(d, payload)

    for l in arch.layers:
        keys = {k for (name, k) in raw if name == l.name}
        if not keys:
            continue
        entry: dict = {}
        if l.has_weight and l.quant_policy != "float":
            want = _POLICY_DTYPE[l.quant_policy]
            if l.quant_policy == "ternary":
                d, trits = take(l.name, "q.trits")
                if d["dtype"] != want:
                    raise CorruptError(f"{l.name}: policy {l.quant_policy} stored as {d['dtype']}")
                _, alpha = take(l.name, "q.alpha")
                entry["q"] = TernaryTensor(trits, alpha)
            else:
                d, values = take(l.name, "q.values")
                if d["dtype"] != want:
                    raise CorruptError(f"{l.name}: policy {l.quant_policy} stored as {d['dtype']}")
                _, scale = take(l.name, "q.scale")
                entry["q"] = Int8Tensor(values, scale, d.get("scale_kind", "per_channel"))
        for k in sorted(keys):
            if not k.startswith("q."):
                d, arr = take(l.name, k)
                if d["dtype"] != "float16":
                    raise CorruptError(f"{l.name}.{k}: expected float16, got {d['dtype']}")
                entry[k] = arr
        layers[l.name] = entry
    extra = set(raw) - used
    if extra:
        layer, key = sorted(extra)[0]
        raise CorruptError(f"tensor {layer}.{key} does not belong to the architecture")
    return layers


def write_atomic(path: str, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_file(path: str, qm: QuantizedModel) -> int:
    data = save_model(qm)
    write_atomic(path, data)
    return len(data)


def load_file(path: str) -> QuantizedModel:
    with open(path, "rb") as f:
        return load_model(f.read())

import json
import struct
import zlib
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _gradcheck import three_layer_net
from prom.arch import apply_prelu_swap, init_params, mobilenet_v2, tiny_dsnet
from prom.cost import cost_report, shipped_table
from prom.engine import quantize_model, run_quantized
from prom.fileformat import (
    MAGIC,
    ChecksumError,
    CorruptError,
    ModelFormatError,
    TruncatedError,
    VersionError,
    load_file,
    load_model,
    pack_trits,
    packed_len,
    save_file,
    save_model,
    unpack_trits,
)
from prom.quant import Int8Tensor, TernaryTensor


# -- trit packing ------------------------------------------------------------------

def test_pack_examples():
    assert pack_trits([1, -1, 0, 1, 1]) == bytes([227])
    assert pack_trits([0, 0, 0, 0, 0]) == bytes([121])
    assert pack_trits([]) == b""
    assert pack_trits([-1] * 5) == bytes([0])
    assert pack_trits([1] * 5) == bytes([242])


def test_unpack_examples():
    assert unpack_trits(bytes([227]), 5).tolist() == [1, -1, 0, 1, 1]
    assert unpack_trits(b"", 0).size == 0
    with pytest.raises(CorruptError):
        unpack_trits(bytes([243]), 5)
    with pytest.raises(TruncatedError):
        unpack_trits(bytes([0]), 6)


def test_partial_group_padding():
    b = pack_trits([1, -1])
    assert len(b) == 1 == packed_len(2)
    assert unpack_trits(b, 5).tolist() == [1, -1, 0, 0, 0]


def test_pack_rejects_non_trits():
    with pytest.raises(ValueError):
        pack_trits([2])


def test_random_round_trips():
    g = np.random.default_rng(0)
    for _ in range(10_000):
        t = g.integers(-1, 2, size=int(g.integers(0, 64))).astype(np.int8)
        p = pack_trits(t)
        assert len(p) == packed_len(t.size)
        assert max(p, default=0) <= 242
        assert np.array_equal(unpack_trits(p, t.size), t)


@given(st.lists(st.sampled_from([-1, 0, 1]), max_size=200))
def test_round_trip_property(trits):
    assert unpack_trits(pack_trits(trits), len(trits)).tolist() == trits


# -- model files ---------------------------------------------------------------------

def _randomized(arch, seed):
    g = np.random.default_rng(seed)
    params = init_params(arch, seed)
    for p in params.values():
        for k, v in p.items():
            if k == "running_var":
                p[k] = g.uniform(0.5, 2, v.shape).astype(np.float32)
            elif k != "weight":
                p[k] = (0.1 * g.standard_normal(v.shape)).astype(np.float32)
    return params


def assert_same_model(a, b):
    assert a.arch == b.arch
    assert a.eps == b.eps
    assert set(a.layers) == set(b.layers)
    for name, ea in a.layers.items():
        eb = b.layers[name]
        assert set(ea) == set(eb), name
        for k, va in ea.items():
            vb = eb[k]
            assert type(va) is type(vb)
            if isinstance(va, TernaryTensor):
                assert np.array_equal(va.trits, vb.trits) and np.array_equal(va.alpha, vb.alpha)
            elif isinstance(va, Int8Tensor):
                assert np.array_equal(va.values, vb.values) and np.array_equal(va.scale, vb.scale)
                assert va.scale_kind == vb.scale_kind
            else:
                assert np.array_equal(va, vb), (name, k)


@pytest.fixture(scope="module")
def tiny_file():
    arch = apply_prelu_swap(tiny_dsnet())
    qm = quantize_model(arch, _randomized(arch, 0)).to_half()
    return qm, save_model(qm)


def test_round_trip_bit_exact(tiny_file):
    qm, blob = tiny_file
    back = load_model(blob)
    assert_same_model(qm, back)
    x = np.random.default_rng(1).standard_normal((3,) + qm.arch.input_shape).astype(np.float32)
    assert np.array_equal(run_quantized(qm, x), run_quantized(back, x))
    assert save_model(back) == blob


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.booleans(), st.booleans())
def test_round_trip_random_models(seed, quantized, prelu):
    arch = three_layer_net(policy=quantized)
    if not prelu:
        arch = replace(arch, layers=tuple(replace(l, act="relu6") if l.kind == "activation" else l
                                          for l in arch.layers))
    qm = quantize_model(arch, _randomized(arch, seed)).to_half()
    assert_same_model(qm, load_model(save_model(qm)))


def test_file_helpers(tmp_path, tiny_file):
    qm, blob = tiny_file
    p = tmp_path / "m.prom"
    assert save_file(str(p), qm) == len(blob)
    assert p.read_bytes() == blob
    assert_same_model(qm, load_file(str(p)))
    assert [f.name for f in tmp_path.iterdir()] == ["m.prom"]


def _header(blob):
    return struct.unpack_from("<4sHHII", blob)


def test_header_layout(tiny_file):
    _, blob = tiny_file
    magic, version, reserved, mlen, crc = _header(blob)
    assert magic == MAGIC and version == 1 and reserved == 0
    manifest = blob[16:16 + mlen]
    assert zlib.crc32(manifest) == crc
    doc = json.loads(manifest)
    assert {"arch", "eps", "tensors"} <= set(doc)
    kinds = {t["dtype"] for t in doc["tensors"]}
    assert kinds == {"trit5", "int8", "float16"}


def test_error_codes_are_distinct(tiny_file):
    _, blob = tiny_file
    errors = {}
    bad = bytearray(blob)
    bad[4] = 2
    with pytest.raises(VersionError) as e:
        load_model(bytes(bad))
    errors["version"] = e.value.code
    with pytest.raises(TruncatedError) as e:
        load_model(blob[:-1])
    errors["truncated"] = e.value.code
    bad = bytearray(blob)
    bad[-5] ^= 0xFF
    with pytest.raises(ChecksumError) as e:
        load_model(bytes(bad))
    errors["checksum"] = e.value.code
    with pytest.raises(CorruptError) as e:
        load_model(b"XXXX" + blob[4:])
    errors["corrupt"] = e.value.code
    assert len(set(errors.values())) == 4


@pytest.mark.parametrize("cut", [0, 3, 15, 16, 100])
def test_truncation_anywhere(tiny_file, cut):
    _, blob = tiny_file
    with pytest.raises(TruncatedError):
        load_model(blob[:cut])


def test_trailing_bytes_rejected(tiny_file):
    _, blob = tiny_file
    with pytest.raises(CorruptError):
        load_model(blob + b"\0")


def test_every_header_and_manifest_byte_is_protected(tiny_file):
    _, blob = tiny_file
    mlen = _header(blob)[3]
    for i in range(16 + mlen):
        bad = bytearray(blob)
        bad[i] ^= 0x01
        with pytest.raises(ModelFormatError):
            load_model(bytes(bad))


def test_payload_flips_fail_checksum(tiny_file):
    _, blob = tiny_file
    start = 16 + _header(blob)[3]
    positions = np.random.default_rng(0).choice(np.arange(start, len(blob)), 300, replace=False)
    for i in sorted(positions) + [start, len(blob) - 1]:
        bad = bytearray(blob)
        bad[i] ^= 0x80
        with pytest.raises(ChecksumError):
            load_model(bytes(bad))


def _rewrite_manifest(blob, fn):
    mlen = _header(blob)[3]
    doc = json.loads(blob[16:16 + mlen])
    fn(doc)
    m = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack("<4sHHII", MAGIC, 1, 0, len(m), zlib.crc32(m)) + m + blob[16 + mlen:]


def test_unknown_manifest_keys_are_ignored(tiny_file):
    qm, blob = tiny_file

    def add(doc):
        doc["producer"] = {"note": "x"}
        doc["tensors"][0]["future"] = 1
        doc["arch"]["layers"][0]["hint"] = "y"
    assert_same_model(qm, load_model(_rewrite_manifest(blob, add)))


def test_policy_dtype_mismatch_rejected(tiny_file):
    _, blob = tiny_file

    def swap(doc):
        for l in doc["arch"]["layers"]:
            if l["kind"] == "conv_depthwise":
                l["quant_policy"] = "ternary"
    with pytest.raises(CorruptError):
        load_model(_rewrite_manifest(blob, swap))


def test_overlapping_extents_rejected(tiny_file):
    _, blob = tiny_file

    def overlap(doc):
        doc["tensors"][1]["offset"] = doc["tensors"][0]["offset"]
    with pytest.raises(ModelFormatError):
        load_model(_rewrite_manifest(blob, overlap))


def test_mobilenet_file_size_matches_accounting():
    arch = apply_prelu_swap(mobilenet_v2())
    blob = save_model(quantize_model(arch, init_params(arch, 0)))
    mlen = _header(blob)[3]
    n_blobs = len(json.loads(blob[16:16 + mlen])["tensors"])
    predicted_bytes = cost_report(mobilenet_v2(), "prom", [shipped_table("45nm")]).total_size * 1e6
    overhead = 16 + mlen + 4 * n_blobs
    assert abs(len(blob) - (predicted_bytes + overhead)) <= 0.02 * (predicted_bytes + overhead)

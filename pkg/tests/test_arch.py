import numpy as np
import pytest

from prom.arch import (
    ArchSpec,
    LayerSpec,
    apply_prelu_swap,
    build_arch,
    check_params,
    check_prom_policy,
    init_params,
    layer_params,
    make_divisible,
    mobilenet_v2,
    param_count,
    tiny_dsnet,
    with_policy,
)
from prom.engine import forward
from prom.tensor import ShapeError


def kind_params(arch, kind):
    return sum(int(np.prod(s)) for l in arch.layers if l.kind == kind for s in layer_params(l).values())


def test_mobilenet_v2_param_count_and_shares():
    a = mobilenet_v2(1.0)
    n = param_count(a)
    assert n == pytest.approx(3.50e6, rel=0.01)
    assert 100 * kind_params(a, "conv_pointwise") / n == pytest.approx(61.2, abs=1.5)
    assert 100 * kind_params(a, "conv_depthwise") / n == pytest.approx(1.9, abs=0.5)


def test_mobilenet_v2_topology():
    a = mobilenet_v2(1.0)
    assert a.layers[0].kind == "conv_dense" and a.layers[0].stride == 2 and a.layers[0].out_ch == 32
    assert a.layers[0].quant_policy == "int8"
    assert a.output_shape() == (1000,)
    assert sum(l.kind == "activation" for l in a.layers) == 35
    assert sum(l.kind == "residual_add" for l in a.layers) == 10
    assert sum(l.kind == "conv_depthwise" for l in a.layers) == 17
    head = a.layer("head.conv")
    assert head.out_ch == 1280
    assert mobilenet_v2(2.0).layer("head.conv").out_ch == 2560
    assert mobilenet_v2(0.75).layer("head.conv").out_ch == 1280
    assert a.shapes()[a.layers.index(head)] == (1280, 7, 7)


@pytest.mark.parametrize("m", [0.75, 1.0, 1.25, 1.5, 1.75, 2.0])
def test_mobilenet_v2_policy_and_validation(m):
    a = mobilenet_v2(m).validate()
    assert check_prom_policy(a) == []
    for l in a.layers:
        if l.kind == "conv_pointwise":
            assert l.quant_policy == "ternary" and l.kernel == 1
        if l.kind in ("conv_depthwise", "conv_dense", "linear"):
            assert l.quant_policy == "int8"
        if l.kind in ("batchnorm", "activation", "avgpool_global", "residual_add"):
            assert l.quant_policy == "float"
        if l.kind in ("conv_pointwise", "conv_depthwise"):
            assert l.out_ch % 8 == 0


def test_width_monotone_params():
    counts = [param_count(mobilenet_v2(m)) for m in (0.75, 1.0, 1.25, 1.5, 1.75, 2.0)]
    assert counts == sorted(counts)


def test_make_divisible():
    assert make_divisible(32 * 0.75) == 24
    assert make_divisible(16 * 1.4) == 24
    assert make_divisible(3) == 8
    assert make_divisible(100) == 104  # not reduced by more than 10%
    for v in np.linspace(8, 500, 97):
        r = make_divisible(v)
        assert r % 8 == 0 and r >= 0.9 * v


def test_invalid_width():
    with pytest.raises(ValueError):
        mobilenet_v2(0)
    with pytest.raises(ValueError):
        build_arch("resnet50")


def test_tiny_dsnet_structure():
    a = tiny_dsnet()
    assert param_count(a) < 150_000
    assert a.input_shape == (3, 32, 32)
    assert a.layers[0].kind == "conv_dense" and a.layers[0].out_ch == 16 and a.layers[0].stride == 1
    projects = [l for l in a.layers if l.name.endswith("project.conv")]
    assert [l.out_ch for l in projects] == [24, 48, 96]
    dws = [l for l in a.layers if l.kind == "conv_depthwise"]
    assert [l.stride for l in dws] == [1, 2, 2]
    assert a.layer("head.conv").out_ch == 192
    assert a.output_shape() == (10,)
    assert check_prom_policy(a) == []


def test_inverted_residual_order():
    a = mobilenet_v2(1.0)
    names = [l.name for l in a.layers if l.name.startswith("block1.")]
    kinds = [a.layer(n).kind for n in names]
    assert kinds == ["conv_pointwise", "batchnorm", "activation", "conv_depthwise", "batchnorm", "activation",
                     "conv_pointwise", "batchnorm"]
    add = a.layer("block2.add")
    assert add.kind == "residual_add"


def test_prelu_swap():
    a = mobilenet_v2(1.0)
    b = apply_prelu_swap(a)
    assert sum(l.act == "prelu" for l in b.layers if l.kind == "activation") == 35
    assert apply_prelu_swap(b) == b
    p = init_params(b, 0)
    for l in b.layers:
        if l.kind == "activation":
            assert np.all(p[l.name]["slope"] == 0.25) and p[l.name]["slope"].shape == (l.out_ch,)


def test_with_policy():
    a = tiny_dsnet()
    f = with_policy(a, "float")
    assert all(l.quant_policy == "float" for l in f.layers)
    i8 = with_policy(a, "int8")
    assert all(l.quant_policy == "int8" for l in i8.layers if l.has_weight)
    assert with_policy(f, "prom") == a
    assert check_prom_policy(f)
    with pytest.raises(ValueError):
        with_policy(a, "int3")


def test_layer_validation():
    with pytest.raises(ValueError):
        LayerSpec("x", "conv_pointwise", 4, 4, kernel=3)
    with pytest.raises(ValueError):
        LayerSpec("x", "conv_depthwise", 4, 8, kernel=3, groups=4)
    with pytest.raises(ValueError):
        LayerSpec("x", "batchnorm", 4, 4, quant_policy="int8")
    with pytest.raises(ValueError):
        LayerSpec("x", "activation", 4, 4, act="gelu")
    with pytest.raises(ValueError):
        LayerSpec("x", "pool3d", 4, 4)


def test_arch_shape_errors():
    bad = ArchSpec("bad", (LayerSpec("c", "conv_pointwise", 4, 8, quant_policy="ternary"),), (3, 8, 8), 1.0, 8)
    with pytest.raises(ShapeError):
        bad.validate()
    res = ArchSpec("res", (LayerSpec("c", "conv_pointwise", 3, 8, quant_policy="ternary"),
                           LayerSpec("r", "residual_add", 8, 8, skip="")), (3, 8, 8), 1.0, 8)
    with pytest.raises(ShapeError):
        res.validate()


def test_json_round_trip():
    for a in (tiny_dsnet(), apply_prelu_swap(mobilenet_v2(1.25))):
        assert ArchSpec.from_json(a.to_json()) == a


def test_init_params_and_check():
    a = tiny_dsnet()
    p = init_params(a, 3)
    check_params(a, p)
    q = init_params(a, 3)
    assert all(np.array_equal(p[k][j], q[k][j]) for k in p for j in p[k])
    w = p["block0.expand.conv"]["weight"]
    assert w.dtype == np.float32 and w.shape == (64, 16, 1, 1)
    p["block0.expand.conv"]["weight"] = w[:, :8]
    with pytest.raises(ShapeError):
        check_params(a, p)
    del p["stem.conv"]
    with pytest.raises(ShapeError):
        check_params(a, p)


def test_zero_input_uniform_logits():
    a = tiny_dsnet()
    p = init_params(a, 0)
    logits = forward(a, p, np.zeros((2, 3, 32, 32), np.float32), "float")
    assert np.allclose(logits, logits[0, 0])
    p["classifier"]["weight"][:] = 0
    x = np.random.default_rng(0).standard_normal((2, 3, 32, 32)).astype(np.float32)
    for mode in ("float", "qat", "quantized_inference"):
        assert np.all(forward(a, p, x, mode) == 0)

"""Network descriptions: layer specs, MobileNetV2, a desk-scale net, and the
mixed-precision policy (ternary 1x1 convs, int8 for every other conv and the
classifier, float for elementwise layers)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from prom.tensor import FLOAT, ShapeError, he_normal_init

CONV_KINDS = ("conv_dense", "conv_pointwise", "conv_depthwise")
WEIGHT_KINDS = CONV_KINDS + ("linear",)
ELEMENTWISE_KINDS = ("batchnorm", "activation", "avgpool_global", "residual_add")
KINDS = WEIGHT_KINDS + ELEMENTWISE_KINDS
POLICIES = ("ternary", "int8", "float")
ACTIVATIONS = ("relu6", "prelu")
PRELU_INIT = 0.25


def prom_policy(kind: str) -> str:
    if kind == "conv_pointwise":
        return "ternary"
    if kind in ("conv_depthwise", "conv_dense", "linear"):
        return "int8"
    return "float"


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    in_ch: int
    out_ch: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    groups: int = 1
    quant_policy: str = "float"
    act: str = ""
    skip: str = ""
    bias: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"{self.name}: unknown layer kind {self.kind!r}")
        if self.quant_policy not in POLICIES:
            raise ValueError(f"{self.name}: unknown quant policy {self.quant_policy!r}")
        if self.in_ch < 1 or self.out_ch < 1:
            raise ValueError(f"{self.name}: channel counts must be positive")
        if self.kind == "conv_pointwise" and (self.kernel != 1 or self.groups != 1):
            raise ValueError(f"{self.name}: pointwise conv needs kernel 1 and groups 1")
        if self.kind == "conv_depthwise" and not (self.groups == self.in_ch == self.out_ch):
            raise ValueError(f"{self.name}: depthwise conv needs groups == in_ch == out_ch")
        if self.kind == "activation" and self.act not in ACTIVATIONS:
            raise ValueError(f"{self.name}: unknown activation {self.act!r}")
        if self.kind in ELEMENTWISE_KINDS and self.quant_policy != "float":
            raise ValueError(f"{self.name}: elementwise layers stay float")

    @property
    def has_weight(self) -> bool:
        return self.kind in WEIGHT_KINDS

    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "linear":
            return (self.out_ch, self.in_ch)
        return (self.out_ch, self.in_ch // self.groups, self.kernel, self.kernel)


@dataclass(frozen=True)
class ArchSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    width_mult: float = 1.0
    num_classes: int = 10
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-layer output shape (without batch) after validating the wiring."""
        shape: tuple[int, ...] = tuple(self.input_shape)
        seen: dict[str, tuple[int, ...]] = {"": shape}
        out = []
        for l in self.layers:
            shape = _layer_out_shape(l, shape, seen)
            seen[l.name] = shape
            out.append(shape)
        return out

    def validate(self) -> "ArchSpec":
        self.shapes()
        for l in self.layers:
            if l.kind in ELEMENTWISE_KINDS and l.quant_policy != "float":
                raise ValueError(f"{l.name}: elementwise layers must be float")
        return self

    def output_shape(self) -> tuple[int, ...]:
        s = self.shapes()
        return s[-1] if s else tuple(self.input_shape)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "width_mult": self.width_mult,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "layers": [asdict(l) for l in self.layers],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        known = set(LayerSpec.__dataclass_fields__)
        layers = tuple(LayerSpec(**{k: v for k, v in ld.items() if k in known}) for ld in d["layers"])
        return cls(
            name=d["name"],
            layers=layers,
            input_shape=tuple(d["input_shape"]),
            width_mult=float(d.get("width_mult", 1.0)),
            num_classes=int(d.get("num_classes", 10)),
        ).validate()

    @classmethod
    def from_json(cls, text: str) -> "ArchSpec":
        return cls.from_dict(json.loads(text))


def _layer_out_shape(l: LayerSpec, shape, seen) -> tuple[int, ...]:
    if l.kind == "linear":
        if len(shape) != 1 or shape[0] != l.in_ch:
            raise ShapeError(f"{l.name}: expects ({l.in_ch},) features, got {shape}")
        return (l.out_ch,)
    if l.kind == "avgpool_global":
        if len(shape) != 3 or shape[0] != l.in_ch:
            raise ShapeError(f"{l.name}: expects {l.in_ch} x H x W, got {shape}")
        return (l.out_ch,)
    if len(shape) != 3 and l.kind != "activation" and l.kind != "batchnorm":
        raise ShapeError(f"{l.name}: expects C x H x W input, got {shape}")
    if shape[0] != l.in_ch:
        raise ShapeError(f"{l.name}: expects {l.in_ch} channels, got {shape[0]}")
    if l.kind in CONV_KINDS:
        if l.in_ch % l.groups or l.out_ch % l.groups:
            raise ShapeError(f"{l.name}: groups must divide channels")
        h = (shape[1] + 2 * l.padding - l.kernel) // l.stride + 1
        w = (shape[2] + 2 * l.padding - l.kernel) // l.stride + 1
        if h < 1 or w < 1:
            raise ShapeError(f"{l.name}: output would be empty")
        return (l.out_ch, h, w)
    if l.kind == "residual_add":
        if l.skip not in seen:
            raise ShapeError(f"{l.name}: skip source {l.skip!r} is not an earlier layer")
        if seen[l.skip] != shape:
            raise ShapeError(f"{l.name}: residual joins {seen[l.skip]} and {shape}")
        return shape
    if l.in_ch != l.out_ch:
        raise ShapeError(f"{l.name}: elementwise layer cannot change channels")
    return shape


def make_divisible(v: float, divisor: int = 8, min_value: int | None = None) -> int:
    """Round a channel count to the nearest multiple of ``divisor``, never
    below ``min_value`` and never more than 10% below ``v``."""
    min_value = min_value or divisor
    n = max(min_value, int(v + divisor / 2) // divisor * divisor)
    if n < 0.9 * v:
        n += divisor
    return n


class _Builder:
    def __init__(self, activation: str = "relu6"):
        self.layers: list[LayerSpec] = []
        self.activation = activation

    def add(self, name, kind, cin, cout, **kw):
        kw.setdefault("quant_policy", prom_policy(kind))
        self.layers.append(LayerSpec(name, kind, cin, cout, **kw))
        return self.layers[-1].name

    def conv_bn_act(self, prefix, kind, cin, cout, kernel=1, stride=1, act=True):
        groups = cin if kind == "conv_depthwise" else 1
        self.add(f"{prefix}.conv", kind, cin, cout, kernel=kernel, stride=stride,
                 padding=kernel // 2, groups=groups)
        last = self.add(f"{prefix}.bn", "batchnorm", cout, cout)
        if act:
            last = self.add(f"{prefix}.act", "activation", cout, cout, act=self.activation)
        return last

    def inverted_residual(self, prefix, block_input, cin, cout, stride, expand):
        hidden = cin * expand
        if expand != 1:
            self.conv_bn_act(f"{prefix}.expand", "conv_pointwise", cin, hidden)
        self.conv_bn_act(f"{prefix}.dw", "conv_depthwise", hidden, hidden, kernel=3, stride=stride)
        last = self.conv_bn_act(f"{prefix}.project", "conv_pointwise", hidden, cout, act=False)
        if stride == 1 and cin == cout:
            last = self.add(f"{prefix}.add", "residual_add", cout, cout, skip=block_input)
        return last


MBV2_SETTINGS = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)


def mobilenet_v2(width_mult: float = 1.0, num_classes: int = 1000, resolution: int = 224) -> ArchSpec:
    if not width_mult > 0:
        raise ValueError(f"width_mult must be positive, got {width_mult}")
    b = _Builder()
    cin = make_divisible(32 * width_mult)
    last = b.conv_bn_act("stem", "conv_dense", 3, cin, kernel=3, stride=2)
    idx = 0
    for t, c, n, s in MBV2_SETTINGS:
        cout = make_divisible(c * width_mult)
        for i in range(n):
            last = b.inverted_residual(f"block{idx}", last, cin, cout, s if i == 0 else 1, t)
            cin = cout
            idx += 1
    head = make_divisible(1280 * max(1.0, width_mult))
    b.conv_bn_act("head", "conv_pointwise", cin, head)
    b.add("pool", "avgpool_global", head, head)
    b.add("classifier", "linear", head, num_classes, bias=True)
    return ArchSpec(f"mobilenet_v2_{width_mult:g}x", tuple(b.layers), (3, resolution, resolution),
                    float(width_mult), num_classes).validate()


def tiny_dsnet(num_classes: int = 10) -> ArchSpec:
    """32x32 depthwise-separable net small enough to train on one CPU core."""
    b = _Builder()
    last = b.conv_bn_act("stem", "conv_dense", 3, 16, kernel=3, stride=1)
    cin = 16
    for i, (c, s) in enumerate(((24, 1), (48, 2), (96, 2))):
        last = b.inverted_residual(f"block{i}", last, cin, c, s, 4)
        cin = c
    b.conv_bn_act("head", "conv_pointwise", cin, 192)
    b.add("pool", "avgpool_global", 192, 192)
    b.add("classifier", "linear", 192, num_classes, bias=False)
    return ArchSpec("tiny_dsnet", tuple(b.layers), (3, 32, 32), 1.0, num_classes).validate()


ARCHS = {"mobilenet_v2": mobilenet_v2, "tiny_dsnet": tiny_dsnet}


def build_arch(name: str, width_mult: float = 1.0, num_classes: int | None = None) -> ArchSpec:
    if name == "mobilenet_v2":
        return mobilenet_v2(width_mult, num_classes or 1000)
    if name == "tiny_dsnet":
        return tiny_dsnet(num_classes or 10)
    raise ValueError(f"unknown architecture {name!r}; choose from {sorted(ARCHS)}")


def apply_prelu_swap(arch: ArchSpec) -> ArchSpec:
    """Turn every activation into a per-channel PReLU."""
    layers = tuple(replace(l, act="prelu") if l.kind == "activation" else l for l in arch.layers)
    return replace(arch, layers=layers)


def with_policy(arch: ArchSpec, policy: str) -> ArchSpec:
    """Override every weight layer's policy: ``prom`` restores the default
    rule, ``float`` makes everything float, ``int8`` makes every weight int8."""
    if policy == "prom":
        fn = prom_policy
    elif policy in ("float", "int8"):
        def fn(kind):
            return policy if kind in WEIGHT_KINDS else "float"
    else:
        raise ValueError(f"unknown policy {policy!r}")
    return replace(arch, layers=tuple(replace(l, quant_policy=fn(l.kind)) for l in arch.layers))


def check_prom_policy(arch: ArchSpec) -> list[str]:
    """Names of layers whose policy departs from the mixed-precision rule."""
    return [l.name for l in arch.layers if l.quant_policy != prom_policy(l.kind)]


def layer_params(l: LayerSpec) -> dict[str, tuple[int, ...]]:
    """Shapes of the trainable parameters a layer owns."""
    if l.has_weight:
        p = {"weight": l.weight_shape()}
        if l.bias:
            p["bias"] = (l.out_ch,)
        return p
    if l.kind == "batchnorm":
        return {"gamma": (l.out_ch,), "beta": (l.out_ch,)}
    if l.kind == "activation" and l.act == "prelu":
        return {"slope": (l.out_ch,)}
    return {}


def param_count(arch: ArchSpec) -> int:
    return sum(int(np.prod(s)) for l in arch.layers for s in layer_params(l).values())


def _layer_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def init_params(arch: ArchSpec, seed: int = 0) -> dict[str, dict[str, np.ndarray]]:
    """Fresh parameters: He-normal (fan-out) convs, N(0, 0.01) classifier,
    identity BatchNorm, PReLU slopes at 0.25."""
    params: dict[str, dict[str, np.ndarray]] = {}
    for i, l in enumerate(arch.layers):
        p: dict[str, np.ndarray] = {}
        if l.kind in CONV_KINDS:
            p["weight"] = he_normal_init(l.weight_shape(), l.out_ch * l.kernel * l.kernel, _layer_seed(seed, i))
        elif l.kind == "linear":
            g = np.random.Generator(np.random.PCG64(_layer_seed(seed, i)))
            p["weight"] = (g.standard_normal(l.weight_shape()) * 0.01).astype(FLOAT)
            if l.bias:
                p["bias"] = np.zeros(l.out_ch, FLOAT)
        elif l.kind == "batchnorm":
            p["gamma"] = np.ones(l.out_ch, FLOAT)
            p["beta"] = np.zeros(l.out_ch, FLOAT)
            p["running_mean"] = np.zeros(l.out_ch, FLOAT)
            p["running_var"] = np.ones(l.out_ch, FLOAT)
        elif l.kind == "activation" and l.act == "prelu":
            p["slope"] = np.full(l.out_ch, PRELU_INIT, FLOAT)
        if p:
            params[l.name] = p
    return params


def check_params(arch: ArchSpec, params) -> None:
    for l in arch.layers:
        for key, shape in layer_params(l).items():
            try:
                arr = params[l.name][key]
            except KeyError:
                raise ShapeError(f"missing parameter {l.name}.{key}") from None
            if tuple(arr.shape) != shape:
                raise ShapeError(f"{l.name}.{key}: expected {shape}, got {tuple(arr.shape)}")

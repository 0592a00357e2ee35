"""Operation counts, energy and storage estimates, and cost reports.

Counting rules:

* a convolution performs ``C_out * (C_in / groups) * K * K * H_out * W_out``
  multiply-accumulates (MACs); a linear layer is a 1x1 convolution on a 1x1 map
* float layers cost one fp16 (or fp32) multiply and one add per MAC
* int8 layers cost one int8 multiply and one int8 add per MAC
* ternary layers cost one int8 add per MAC and no multiplies; zero trits are
  still counted, so the figure does not depend on sparsity
* BatchNorm, activations, residual adds, pooling and dequantization scaling
  are elementwise and are left out

Energy tables give femtojoules per operation; reports are in microjoules.
Storage is in decimal megabytes (10**6 bytes).
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources

from prom.arch import ArchSpec, apply_prelu_swap, build_arch, layer_params, with_policy

TERNARY_BITS = math.log2(3)
OP_TYPES = ("int8", "int32", "fp16", "fp32")
LAYER_GROUPS = ("pointwise", "depthwise", "dense", "linear")
POLICIES = ("float16", "float32", "prom", "int8", "int4", "int2")
NODES = ("45nm", "7nm")
FJ_PER_UJ = 1e9
BYTES_PER_MB = 1e6
ENV_TABLE = "PROM_ENERGY_TABLE"

_GROUP_OF = {"conv_pointwise": "pointwise", "conv_depthwise": "depthwise", "conv_dense": "dense", "linear": "linear"}


class CostError(ValueError):
    pass


class MissingEnergyEntry(CostError):
    def __init__(self, op_type: str, node: str):
        super().__init__(f"energy table {node} has no entry for type {op_type!r}")
        self.op_type = op_type


# -- counts ----------------------------------------------------------------

@dataclass
class LayerOps:
    name: str
    kind: str
    dtype: str  # arithmetic type tag, "" for elementwise layers
    macs: int = 0
    adds: dict[str, int] = field(default_factory=dict)
    muls: dict[str, int] = field(default_factory=dict)
    params: dict[float, int] = field(default_factory=dict)  # bit width -> count

    @property
    def group(self) -> str:
        return _GROUP_OF.get(self.kind, "elementwise")


@dataclass
class OpCounts:
    layers: list[LayerOps] = field(default_factory=list)

    def total(self, what: str) -> dict:
        out: dict = {}
        for l in self.layers:
            for k, v in getattr(l, what).items():
                out[k] = out.get(k, 0) + v
        return out

    @property
    def macs(self) -> int:
        return sum(l.macs for l in self.layers)

    def scaled(self, factor: int) -> "OpCounts":
        return OpCounts([LayerOps(l.name, l.kind, l.dtype, l.macs * factor,
                                  {k: v * factor for k, v in l.adds.items()},
                                  {k: v * factor for k, v in l.muls.items()},
                                  {k: v * factor for k, v in l.params.items()}) for l in self.layers])


def _weight_bits(policy: str, float_type: str) -> float:
    if policy == "ternary":
        return TERNARY_BITS
    if policy == "int8":
        return 8
    return 32 if float_type == "fp32" else 16


def count_ops(arch: ArchSpec, input_shape=None, float_type: str = "fp16") -> OpCounts:
    """Per-layer operation and parameter counts under each layer's policy."""
    if float_type not in ("fp16", "fp32"):
        raise CostError(f"float type must be fp16 or fp32, got {float_type!r}")
    if input_shape is not None and tuple(input_shape) != tuple(arch.input_shape):
        arch = ArchSpec(arch.name, arch.layers, tuple(input_shape), arch.width_mult, arch.num_classes)
    shapes = arch.shapes() if arch.layers else []
    side_bits = 32 if float_type == "fp32" else 16
    out = OpCounts()
    for l, shp in zip(arch.layers, shapes):
        params: dict[float, int] = {}
        if l.has_weight:
            if l.kind == "linear":
                spatial = 1
            else:
                spatial = shp[1] * shp[2]
            macs = l.out_ch * (l.in_ch // l.groups) * l.kernel * l.kernel * spatial
            wbits = _weight_bits(l.quant_policy, float_type)
            nweights = math.prod(l.weight_shape())
            params[wbits] = params.get(wbits, 0) + nweights
            side = l.out_ch if l.bias else 0
            if l.quant_policy != "float":
                side += l.out_ch  # per-channel scale vector
            if side:
                params[side_bits] = params.get(side_bits, 0) + side
            if l.quant_policy == "ternary":
                ops = LayerOps(l.name, l.kind, "int8", macs, {"int8": macs}, {"int8": 0}, params)
            elif l.quant_policy == "int8":
                ops = LayerOps(l.name, l.kind, "int8", macs, {"int8": macs}, {"int8": macs}, params)
            else:
                ops = LayerOps(l.name, l.kind, float_type, macs, {float_type: macs}, {float_type: macs}, params)
        else:
            # running statistics fold into the affine pair at export time
            n = 2 * l.out_ch if l.kind == "batchnorm" else sum(math.prod(s) for s in layer_params(l).values())
            if n:
                params[side_bits] = n
            ops = LayerOps(l.name, l.kind, "", 0, {}, {}, params)
        out.layers.append(ops)
    return out


# -- energy tables ---------------------------------------------------------

@dataclass(frozen=True)
class EnergyTable:
    node: str
    entries: dict[str, tuple[float, float]]  # type -> (add_fj, mul_fj)

    def __post_init__(self):
        for t, (a, m) in self.entries.items():
            if not (a > 0 and m > 0):
                raise CostError(f"{self.node}: entries for {t} must be positive")
            if m < a:
                raise CostError(f"{self.node}: {t} multiply cheaper than add")

    def cost(self, op_type: str, op: str) -> float:
        try:
            add, mul = self.entries[op_type]
        except KeyError:
            raise MissingEnergyEntry(op_type, self.node) from None
        return add if op == "add" else mul

    def scaled(self, op_type: str, factor: float) -> "EnergyTable":
        e = dict(self.entries)
        if op_type in e:
            a, m = e[op_type]
            e[op_type] = (a * factor, m * factor)
        return EnergyTable(self.node, e)

    def to_dict(self) -> dict:
        return {"node": self.node, "unit": "fJ",
                "entries": [{"type": t, "add_fj": a, "mul_fj": m} for t, (a, m) in self.entries.items()]}

    @classmethod
    def from_dict(cls, d: dict) -> "EnergyTable":
        try:
            entries = {e["type"]: (float(e["add_fj"]), float(e["mul_fj"])) for e in d["entries"]}
            return cls(str(d["node"]), entries)
        except (KeyError, TypeError) as e:
            raise CostError(f"malformed energy table: {e}") from e


def load_table(path: str) -> EnergyTable:
    with open(path) as f:
        return EnergyTable.from_dict(json.load(f))


def shipped_table(node: str) -> EnergyTable:
    if node not in NODES:
        raise CostError(f"no shipped energy table for node {node!r}; choose from {NODES}")
    text = resources.files("prom").joinpath("data", f"energy_{node}.json").read_text()
    return EnergyTable.from_dict(json.loads(text))


def default_table(node: str = "45nm") -> EnergyTable:
    """Shipped table for ``node`` unless $PROM_ENERGY_TABLE names a table for it."""
    path = os.environ.get(ENV_TABLE)
    if path:
        t = load_table(path)
        if t.node == node:
            return t
    return shipped_table(node)


@dataclass
class EnergyResult:
    node: str
    per_layer: dict[str, float]  # µJ
    add: dict[str, float]
    mul: dict[str, float]

    @property
    def total(self) -> float:
        return sum(self.per_layer.values())


def energy(oc: OpCounts, t: EnergyTable) -> EnergyResult:
    add, mul, per = {}, {}, {}
    for l in oc.layers:
        a = sum(n * t.cost(k, "add") for k, n in l.adds.items() if n)
        m = sum(n * t.cost(k, "mul") for k, n in l.muls.items() if n)
        add[l.name] = a / FJ_PER_UJ
        mul[l.name] = m / FJ_PER_UJ
        per[l.name] = (a + m) / FJ_PER_UJ
    return EnergyResult(t.node, per, add, mul)


def sub8_table(t: EnergyTable, bits: int) -> EnergyTable:
    """int8 energies halved for every step 8 -> 4 -> 2."""
    if bits not in (8, 4, 2):
        raise CostError(f"bits must be 8, 4 or 2, got {bits}")
    return t.scaled("int8", 0.5 ** {8: 0, 4: 1, 2: 2}[bits])


def sub8_mode(oc: OpCounts, bits: int, t: EnergyTable) -> float:
    return energy(oc, sub8_table(t, bits)).total


def energy_split(oc: OpCounts, t: EnergyTable, group_by: str = "layer_kind") -> dict[str, float]:
    """Percentage shares of total energy by layer group or by add/mul."""
    e = energy(oc, t)
    total = e.total
    if group_by == "layer_kind":
        out = {g: 0.0 for g in LAYER_GROUPS}
        for l in oc.layers:
            if l.group in out:
                out[l.group] += e.per_layer[l.name]
    elif group_by == "op_kind":
        out = {"add": sum(e.add.values()), "mul": sum(e.mul.values())}
    else:
        raise CostError(f"group_by must be 'layer_kind' or 'op_kind', got {group_by!r}")
    if total == 0:
        return {k: 0.0 for k in out}
    return {k: 100.0 * v / total for k, v in out.items()}


def layer_storage_mb(l: LayerOps, int_bits: int = 8) -> float:
    bits = sum((int_bits if b == 8 else b) * n for b, n in l.params.items())
    return bits / 8 / BYTES_PER_MB


def storage_size(oc: OpCounts, int_bits: int = 8) -> dict[str, float]:
    """MB per layer; ``int_bits`` re-prices int8 weights for sub-8-bit modes."""
    return {l.name: layer_storage_mb(l, int_bits) for l in oc.layers}


# -- policies and reports --------------------------------------------------

def policy_arch(arch: ArchSpec, policy: str) -> tuple[ArchSpec, str, int]:
    """Apply a costing policy; returns (arch, float type, integer bits)."""
    if policy in ("float16", "float32"):
        return with_policy(arch, "float"), "fp16" if policy == "float16" else "fp32", 8
    if policy == "prom":
        return apply_prelu_swap(with_policy(arch, "prom")), "fp16", 8
    if policy in ("int8", "int4", "int2"):
        return with_policy(arch, "int8"), "fp16", int(policy[3:])
    raise CostError(f"unknown policy {policy!r}; choose from {POLICIES}")


@dataclass
class ReportRow:
    layer: str
    kind: str
    dtype: str
    macs: int
    adds: int
    muls: int
    size_mb: float
    add_uj: dict[str, float]
    mul_uj: dict[str, float]

    def energy(self, node: str) -> float:
        return self.add_uj[node] + self.mul_uj[node]


@dataclass
class CostReport:
    arch: str
    width: float
    policy: str
    nodes: list[str]
    rows: list[ReportRow]

    def total_energy(self, node: str) -> float:
        return sum(r.energy(node) for r in self.rows)

    @property
    def total_size(self) -> float:
        return sum(r.size_mb for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def share_by_kind(self, node: str) -> dict[str, float]:
        out = {g: 0.0 for g in LAYER_GROUPS}
        for r in self.rows:
            g = _GROUP_OF.get(r.kind)
            if g:
                out[g] += r.energy(node)
        tot = self.total_energy(node)
        return {k: (100.0 * v / tot if tot else 0.0) for k, v in out.items()}

    def op_split(self, node: str) -> dict[str, float]:
        add = sum(r.add_uj[node] for r in self.rows)
        mul = sum(r.mul_uj[node] for r in self.rows)
        tot = add + mul
        return {"add": 100.0 * add / tot if tot else 0.0, "mul": 100.0 * mul / tot if tot else 0.0}

    def summary(self) -> dict:
        return {
            "macs": self.total_macs,
            "size_mb": self.total_size,
            "energy_uj": {n: self.total_energy(n) for n in self.nodes},
            "share_by_kind": {n: self.share_by_kind(n) for n in self.nodes},
            "op_split": {n: self.op_split(n) for n in self.nodes},
        }


def cost_report(arch: ArchSpec, policy: str, tables: list[EnergyTable] | None = None) -> CostReport:
    a, ftype, bits = policy_arch(arch, policy)
    oc = count_ops(a, float_type=ftype)
    tables = tables if tables is not None else [default_table(n) for n in NODES]
    per_node = {t.node: energy(oc, sub8_table(t, bits)) for t in tables}
    sizes = storage_size(oc, bits)
    rows = []
    for l in oc.layers:
        rows.append(ReportRow(l.name, l.kind, l.dtype, l.macs, sum(l.adds.values()), sum(l.muls.values()),
                              sizes[l.name], {n: e.add[l.name] for n, e in per_node.items()},
                              {n: e.mul[l.name] for n, e in per_node.items()}))
    return CostReport(arch.name, arch.width_mult, policy, [t.node for t in tables], rows)


def named_report(arch: str, width: float, policy: str, tables=None, num_classes: int | None = None) -> CostReport:
    return cost_report(build_arch(arch, width, num_classes), policy, tables)


_FIXED = ["layer", "kind", "dtype", "macs", "adds", "muls", "size_mb"]


def _csv_header(nodes) -> list[str]:
    cols = list(_FIXED)
    for n in nodes:
        cols += [f"add_uj_{n}", f"mul_uj_{n}", f"energy_uj_{n}"]
    return cols


def emit_report(r: CostReport, fmt: str = "csv") -> bytes:
    """CSV: a ``#`` metadata line, a header, one row per layer, a TOTAL row.
    JSON: metadata, ``layers`` and ``totals`` objects."""
    if fmt == "json":
        doc = {
            "arch": r.arch, "width": r.width, "policy": r.policy, "nodes": r.nodes,
            "layers": [{"layer": x.layer, "kind": x.kind, "dtype": x.dtype, "macs": x.macs, "adds": x.adds,
                        "muls": x.muls, "size_mb": x.size_mb, "add_uj": x.add_uj, "mul_uj": x.mul_uj}
                       for x in r.rows],
            "totals": r.summary(),
        }
        return (json.dumps(doc, indent=1) + "\n").encode()
    if fmt != "csv":
        raise CostError(f"unknown report format {fmt!r}")
    buf = io.StringIO()
    buf.write(f"# arch={r.arch} width={r.width!r} policy={r.policy} nodes={','.join(r.nodes)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_csv_header(r.nodes))
    for x in r.rows:
        row = [x.layer, x.kind, x.dtype, x.macs, x.adds, x.muls, repr(x.size_mb)]
        for n in r.nodes:
            row += [repr(x.add_uj[n]), repr(x.mul_uj[n]), repr(x.energy(n))]
        w.writerow(row)
    tot = ["TOTAL", "", "", r.total_macs, sum(x.adds for x in r.rows), sum(x.muls for x in r.rows),
           repr(r.total_size)]
    for n in r.nodes:
        tot += [repr(sum(x.add_uj[n] for x in r.rows)), repr(sum(x.mul_uj[n] for x in r.rows)),
                repr(r.total_energy(n))]
    w.writerow(tot)
    return buf.getvalue().encode()


def parse_report(data: bytes, fmt: str = "csv") -> CostReport:
    text = data.decode()
    if fmt == "json":
        d = json.loads(text)
        rows = [ReportRow(x["layer"], x["kind"], x["dtype"], x["macs"], x["adds"], x["muls"], x["size_mb"],
                          dict(x["add_uj"]), dict(x["mul_uj"])) for x in d["layers"]]
        return CostReport(d["arch"], d["width"], d["policy"], list(d["nodes"]), rows)
    if fmt != "csv":
        raise CostError(f"unknown report format {fmt!r}")
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# "):
        raise CostError("report is missing its metadata line")
    meta = dict(kv.split("=", 1) for kv in lines[0][2:].split())
    nodes = meta["nodes"].split(",") if meta.get("nodes") else []
    rows = []
    for rec in csv.DictReader(lines[1:]):
        if rec["layer"] == "TOTAL":
            continue
        rows.append(ReportRow(rec["layer"], rec["kind"], rec["dtype"], int(rec["macs"]), int(rec["adds"]),
                              int(rec["muls"]), float(rec["size_mb"]),
                              {n: float(rec[f"add_uj_{n}"]) for n in nodes},
                              {n: float(rec[f"mul_uj_{n}"]) for n in nodes}))
    return CostReport(meta["arch"], float(meta["width"]), meta["policy"], nodes, rows)


def report_schema() -> dict:
    return json.loads(resources.files("prom").joinpath("data", "cost_report.schema.json").read_text())

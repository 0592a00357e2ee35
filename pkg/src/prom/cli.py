"""Command-line interface.

Exit codes: 0 success, 1 computation failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from prom import cost as costmod
from prom.arch import ArchSpec, build_arch, check_params
from prom.data import DataFormatError, Dataset, load_idx_dataset, load_tensor_dir_dataset, synthetic_dataset
from prom.data import write_idx, write_tensor_dir
from prom.engine import NonFiniteError, QuantOptions, forward, quantize_model, run_quantized
from prom.fileformat import ModelFormatError, load_file, save_model, write_atomic
from prom.train import TrainConfig, TrainingDiverged, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
IDX_FILES = ("train-images.idx", "train-labels.idx", "val-images.idx", "val-labels.idx")


class UsageError(Exception):
    """Bad arguments or unreadable inputs (exit 2)."""


class Failure(Exception):
    """A computation ran but did not succeed (exit 1)."""


def _out(msg: str = "") -> None:
    print(msg, flush=True)


def _write_text(path: str, text: str) -> None:
    write_atomic(path, text.encode())


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _writable(*paths) -> None:
    """Fail before any work if an output directory is missing."""
    for p in paths:
        if p:
            d = os.path.dirname(os.path.abspath(p))
            if not os.path.isdir(d):
                raise UsageError(f"output directory does not exist: {d}")


# -- weights ---------------------------------------------------------------

def save_weights(path: str, params) -> None:
    buf = io.BytesIO()
    np.savez(buf, **{f"{layer}/{k}": v for layer, p in params.items() for k, v in p.items()})
    write_atomic(path, buf.getvalue())


def load_weights(path: str) -> dict:
    params: dict[str, dict[str, np.ndarray]] = {}
    with np.load(_require(path, "weights file")) as z:
        for key in z.files:
            if "/" not in key:
                raise UsageError(f"{path}: key {key!r} is not of the form layer/param")
            layer, k = key.rsplit("/", 1)
            params.setdefault(layer, {})[k] = z[key].astype(np.float32)
    return params


def _load_arch(args) -> ArchSpec:
    if getattr(args, "arch_manifest", None):
        with open(_require(args.arch_manifest, "arch manifest")) as f:
            try:
                return ArchSpec.from_json(f.read())
            except (ValueError, KeyError, TypeError) as e:
                raise UsageError(f"{args.arch_manifest}: invalid arch manifest: {e}") from e
    try:
        return build_arch(args.arch, args.width, args.num_classes)
    except ValueError as e:
        raise UsageError(str(e)) from e


# -- data ------------------------------------------------------------------

def load_dataset(path: str) -> Dataset:
    _require(path, "dataset")
    if all(os.path.exists(os.path.join(path, f)) for f in IDX_FILES):
        return load_idx_dataset(*(os.path.join(path, f) for f in IDX_FILES))
    if os.path.exists(os.path.join(path, "train", "labels.csv")):
        return load_tensor_dir_dataset(os.path.join(path, "train"), os.path.join(path, "val"))
    raise UsageError(f"dataset {path} holds neither {', '.join(IDX_FILES)} nor train/ and val/ tensor directories")


def cmd_make_data(args) -> int:
    d = synthetic_dataset(args.train, args.val, args.classes, noise=args.noise, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    if args.format == "idx":
        for name, arr in zip(IDX_FILES, (d.x_train, d.y_train.astype(np.uint8), d.x_val, d.y_val.astype(np.uint8))):
            write_idx(os.path.join(args.out, name), arr)
    else:
        write_tensor_dir(os.path.join(args.out, "train"), d.x_train, d.y_train)
        write_tensor_dir(os.path.join(args.out, "val"), d.x_val, d.y_val)
    _out(f"wrote {len(d.x_train)} train and {len(d.x_val)} val images to {args.out}")
    return EXIT_OK


# -- train / quantize / infer ----------------------------------------------

def cmd_train(args) -> int:
    _writable(args.out, args.metrics, args.save_weights, args.save_arch)
    if args.synthetic:
        data = synthetic_dataset(seed=args.seed)
    elif args.data:
        data = load_dataset(args.data)
    else:
        raise UsageError("train needs --data DIR or --synthetic")
    arch = _load_arch(args)
    try:
        cfg = TrainConfig(lr0=args.lr, momentum=args.momentum, weight_decay=args.weight_decay, epochs=args.epochs,
                          batch_size=args.batch_size, wd_reset_fraction=args.wd_reset_fraction, seed=args.seed,
                          mode=args.mode, use_prelu=not args.no_prelu, per_channel_pw=not args.per_tensor_pw,
                          use_cosine=not args.no_cosine, dw_ternary=args.dw_ternary,
                          label_smoothing=args.label_smoothing)
        res = train(arch, data, cfg, progress=None if args.quiet else
                    lambda r: _out(f"epoch {r['epoch']:3d}  loss {r['loss']:.4f}  train {r['train_acc']:.3f}  "
                                   f"val {r['val_acc']:.3f}  lr {r['lr']:.5f}"))
    except ValueError as e:
        raise UsageError(str(e)) from e
    _write_text(args.metrics, res.log.to_csv())
    qm = quantize_model(res.arch, res.state.params, QuantOptions(per_channel_pw=cfg.per_channel_pw)).to_half()
    write_atomic(args.out, save_model(qm))
    if args.save_weights:
        save_weights(args.save_weights, res.state.params)
    if args.save_arch:
        _write_text(args.save_arch, res.arch.to_json(indent=1))
    _out(json.dumps({"model": args.out, "metrics": args.metrics, **res.final}))
    return EXIT_OK


def cmd_quantize(args) -> int:
    _writable(args.out)
    arch = _load_arch(args)
    params = load_weights(args.weights)
    try:
        check_params(arch, params)
    except ValueError as e:
        raise UsageError(f"{args.weights} does not match the architecture: {e}") from e
    qm = quantize_model(arch, params, QuantOptions(per_channel_pw=not args.per_tensor_pw)).to_half()
    data = save_model(qm)
    write_atomic(args.out, data)
    _out(f"wrote {args.out} ({len(data)} bytes)")
    return EXIT_OK


def cmd_infer(args) -> int:
    qm = load_file(_require(args.model, "model file"))
    x = np.load(_require(args.input, "input tensor")).astype(np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != tuple(qm.arch.input_shape):
        raise UsageError(f"input shape {x.shape} does not fit N x {tuple(qm.arch.input_shape)}")
    if args.mode == "quantized":
        logits = run_quantized(qm, x)
    else:
        if not args.weights:
            raise UsageError(f"--mode {args.mode} needs --weights with the float master weights")
        params = load_weights(args.weights)
        mode = "qat" if args.mode == "qat" else "float"
        try:
            logits = forward(qm.arch, params, x, mode)
        except ValueError as e:
            raise UsageError(str(e)) from e
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "pred"] + [f"logit_{k}" for k in range(logits.shape[1])])
    for i, row in enumerate(logits):
        w.writerow([i, int(np.argmax(row))] + [repr(float(v)) for v in row])
    if args.out:
        _write_text(args.out, buf.getvalue())
        _out(f"wrote {len(logits)} predictions to {args.out}")
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


# -- cost ------------------------------------------------------------------

def _tables(args) -> list:
    nodes = costmod.NODES if args.node == "all" else (args.node,)
    tables = []
    for n in nodes:
        if args.table:
            t = costmod.load_table(_require(args.table, "energy table"))
            if args.node != "all" or t.node == n:
                tables.append(t)
                continue
        tables.append(costmod.default_table(n))
    return tables


def _fmt_report(r: costmod.CostReport) -> str:
    lines = [f"{r.arch}  width {r.width:g}  policy {r.policy}"]
    head = f"{'layer':28s} {'kind':16s} {'dtype':5s} {'MACs':>12s} {'size MB':>9s}"
    head += "".join(f" {'uJ ' + n:>10s}" for n in r.nodes)
    lines.append(head)
    for x in r.rows:
        if not x.macs and not x.size_mb:
            continue
        line = f"{x.layer:28s} {x.kind:16s} {x.dtype:5s} {x.macs:12d} {x.size_mb:9.5f}"
        line += "".join(f" {x.energy(n):10.4f}" for n in r.nodes)
        lines.append(line)
    tot = f"{'TOTAL':28s} {'':16s} {'':5s} {r.total_macs:12d} {r.total_size:9.4f}"
    tot += "".join(f" {r.total_energy(n):10.2f}" for n in r.nodes)
    lines.append(tot)
    for n in r.nodes:
        share = ", ".join(f"{k} {v:.1f}%" for k, v in r.share_by_kind(n).items())
        ops = r.op_split(n)
        lines.append(f"[{n}] by layer kind: {share}; mul {ops['mul']:.1f}% / add {ops['add']:.1f}%")
    return "\n".join(lines) + "\n"


def _summary_rows(reports) -> str:
    nodes = reports[0].nodes if reports else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arch", "width", "policy", "macs", "size_mb"] + [f"energy_uj_{n}" for n in nodes])
    for r in reports:
        w.writerow([r.arch, r.width, r.policy, r.total_macs, repr(r.total_size)]
                   + [repr(r.total_energy(n)) for n in nodes])
    return buf.getvalue()


def cmd_cost(args) -> int:
    tables = _tables(args)
    widths = [float(v) for v in args.sweep.split(",")] if args.sweep else [args.width]
    policies = args.compare.split(",") if args.compare else [args.policy]
    for p in policies:
        if p not in costmod.POLICIES:
            raise UsageError(f"unknown policy {p!r}; choose from {', '.join(costmod.POLICIES)}")
    reports = []
    for wm in widths:
        arch = build_arch(args.arch, wm, args.num_classes)
        for p in policies:
            reports.append(costmod.cost_report(arch, p, tables))
    if len(reports) == 1:
        r = reports[0]
        text = _fmt_report(r) if args.format == "table" else costmod.emit_report(r, args.format).decode()
    elif args.format == "json":
        text = json.dumps([json.loads(costmod.emit_report(r, "json")) for r in reports], indent=1) + "\n"
    elif args.format == "csv":
        text = _summary_rows(reports)
    else:
        nodes = reports[0].nodes
        lines = [f"{'width':>6s} {'policy':8s} {'MACs':>12s} {'size MB':>9s}" + "".join(f" {'uJ ' + n:>10s}" for n in nodes)]
        for r in reports:
            lines.append(f"{r.width:6.2f} {r.policy:8s} {r.total_macs:12d} {r.total_size:9.3f}"
                         + "".join(f" {r.total_energy(n):10.2f}" for n in nodes))
        text = "\n".join(lines) + "\n"
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- selftest --------------------------------------------------------------

def cmd_selftest(args) -> int:
    from prom import selftest

    tables = None
    if args.table:
        t = costmod.load_table(_require(args.table, "energy table"))
        tables = {t.node: t}
    model = load_file(_require(args.model, "model file")) if args.model else None
    results = selftest.run_all(tables=tables, model=model, quick=args.quick)
    for name, ok, detail in results:
        _out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    failed = [r for r in results if not r[1]]
    _out(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        raise Failure(f"{len(failed)} self-test check(s) failed")
    return EXIT_OK


def cmd_export_arch(args) -> int:
    arch = _load_arch(args)
    text = arch.to_json(indent=1) + "\n"
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def _arch_args(p, default="tiny_dsnet", manifest=True):
    p.add_argument("--arch", default=default, help="tiny_dsnet or mobilenet_v2")
    p.add_argument("--width", type=float, default=1.0, help="width multiplier")
    p.add_argument("--num-classes", type=int, default=None)
    if manifest:
        p.add_argument("--arch-manifest", help="JSON architecture file; overrides --arch")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="prom", description="Ternary pointwise / int8 network toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="quantization-aware training")
    _arch_args(p)
    p.add_argument("--data", help="dataset directory (IDX files or train/ val/ tensor dirs)")
    p.add_argument("--synthetic", action="store_true", help="use the built-in synthetic dataset")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--lr", type=float, default=TrainConfig.lr0)
    p.add_argument("--momentum", type=float, default=TrainConfig.momentum)
    p.add_argument("--weight-decay", type=float, default=TrainConfig.weight_decay)
    p.add_argument("--wd-reset-fraction", type=float, default=0.5)
    p.add_argument("--label-smoothing", type=float, default=0.0)
    p.add_argument("--mode", choices=("qat", "float"), default="qat")
    p.add_argument("--no-prelu", action="store_true", help="keep ReLU6 activations")
    p.add_argument("--per-tensor-pw", action="store_true", help="one ternary scale per pointwise layer")
    p.add_argument("--no-cosine", action="store_true", help="constant learning rate")
    p.add_argument("--dw-ternary", action="store_true", help="ternary depthwise weights (ablation)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="model.prom", help="quantized model file")
    p.add_argument("--metrics", default="metrics.csv", help="per-epoch metrics CSV")
    p.add_argument("--save-weights", help="also write float master weights (.npz)")
    p.add_argument("--save-arch", help="also write the trained architecture (JSON)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quantize", help="quantize float weights into a model file")
    _arch_args(p)
    p.add_argument("--weights", required=True, help=".npz with layer/param keys")
    p.add_argument("--per-tensor-pw", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("infer", help="run a model file on an .npy batch")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help=".npy, N x C x H x W float")
    p.add_argument("--mode", choices=("quantized", "qat", "float"), default="quantized")
    p.add_argument("--weights", help="float master weights for --mode qat/float")
    p.add_argument("--out", help="predictions CSV (stdout if omitted)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("cost", help="operation, energy and storage estimates")
    _arch_args(p, default="mobilenet_v2", manifest=False)
    p.add_argument("--policy", default="prom", help=", ".join(costmod.POLICIES))
    p.add_argument("--node", choices=costmod.NODES + ("all",), default="all")
    p.add_argument("--table", help=f"energy table JSON (default: ${costmod.ENV_TABLE} or the shipped table)")
    p.add_argument("--compare", help="comma-separated policies, e.g. int8,int4,int2,prom,float16")
    p.add_argument("--sweep", help="comma-separated width multipliers")
    p.add_argument("--format", choices=("table", "csv", "json"), default="table")
    p.add_argument("--out")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("selftest", help="kernel, format, distribution and calibration checks")
    p.add_argument("--model", help="also verify this model file")
    p.add_argument("--table", help="energy table to calibrate against the reference totals")
    p.add_argument("--quick", action="store_true", help="fewer random instances")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("make-data", help="write the synthetic dataset to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("idx", "tensor-dir"), default="idx")
    p.add_argument("--train", type=int, default=600)
    p.add_argument("--val", type=int, default=300)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--noise", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("export-arch", help="write an architecture manifest")
    _arch_args(p, manifest=False)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_arch)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, DataFormatError, ModelFormatError, costmod.CostError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (Failure, TrainingDiverged, NonFiniteError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

"""Quantization-aware training loop: SGD with momentum, coupled weight decay
that is switched off part-way through, and a cosine learning-rate decay."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from prom.arch import ArchSpec, apply_prelu_swap, init_params
from prom.data import Dataset
from prom.engine import NonFiniteError, QuantOptions, forward, loss_and_grads
from prom.quant import quantize_ternary, ternary_stats

# parameters exempt from weight decay
NO_DECAY = ("gamma", "beta", "slope")
TRAINABLE = ("weight", "bias", "gamma", "beta", "slope")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, layer: str, what: str):
        super().__init__(f"training diverged at epoch {epoch}, step {step}: non-finite {what} in layer {layer}")
        self.epoch, self.step, self.layer = epoch, step, layer


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 20
    batch_size: int = 50
    wd_reset_fraction: float = 0.5
    seed: int = 0
    mode: str = "qat"
    use_prelu: bool = True
    per_channel_pw: bool = True
    use_cosine: bool = True
    dw_ternary: bool = False
    label_smoothing: float = 0.0
    eval_batch: int = 250

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0 < self.wd_reset_fraction <= 1:
            raise ValueError("wd_reset_fraction must lie in (0, 1]")
        if self.mode not in ("qat", "float"):
            raise ValueError(f"training mode must be 'qat' or 'float', got {self.mode!r}")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum must lie in [0, 1) and weight_decay be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ParamState:
    """Float32 master parameters, momentum buffers and the global step."""

    params: dict[str, dict[str, np.ndarray]]
    velocity: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    step: int = 0

    def check(self) -> None:
        for name, p in self.params.items():
            for k, v in p.items():
                if not np.all(np.isfinite(v)):
                    raise ValueError(f"{name}.{k} is not finite")
            if "running_var" in p and not np.all(p["running_var"] > 0):
                raise ValueError(f"{name}.running_var must be positive")


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return 0.0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def weight_decay_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    return cfg.weight_decay if step < cfg.wd_reset_fraction * total_steps else 0.0


def sgd_step(state: ParamState, grads, lr: float, cfg: TrainConfig, weight_decay: float | None = None) -> ParamState:
    """In-place SGD update; returns ``state`` for chaining."""
    wd = cfg.weight_decay if weight_decay is None else weight_decay
    mu = np.float32(cfg.momentum)
    for name, g in grads.items():
        p = state.params[name]
        v = state.velocity.setdefault(name, {})
        for k, gk in g.items():
            w = p[k]
            d = np.asarray(gk, w.dtype)
            if wd and k not in NO_DECAY:
                d = d + w.dtype.type(wd) * w
            buf = v.get(k)
            if buf is None:
                # first step: buffer starts at zero, so v = g
                buf = d.copy()
            else:
                buf *= mu
                buf += d
            v[k] = buf
            w -= w.dtype.type(lr) * buf
    state.step += 1
    return state


def prepare_arch(arch: ArchSpec, cfg: TrainConfig) -> ArchSpec:
    if cfg.use_prelu:
        arch = apply_prelu_swap(arch)
    if cfg.dw_ternary:
        arch = replace(arch, layers=tuple(
            replace(l, quant_policy="ternary") if l.kind == "conv_depthwise" else l for l in arch.layers))
    return arch


def pointwise_zero_fractions(arch: ArchSpec, params, per_channel: bool = True) -> dict[str, float]:
    out = {}
    for l in arch.layers:
        if l.kind == "conv_pointwise" and l.quant_policy == "ternary":
            t = quantize_ternary(params[l.name]["weight"], per_channel=per_channel)
            out[l.name] = ternary_stats(t)["frac_zero"]
    return out


def evaluate(arch: ArchSpec, params, x, y, mode: str, opts: QuantOptions = QuantOptions(),
             batch: int = 250) -> tuple[float, float]:
    """Mean loss and accuracy in inference mode."""
    if len(x) == 0:
        return float("nan"), float("nan")
    total_loss, correct = 0.0, 0
    for i in range(0, len(x), batch):
        logits = forward(arch, params, x[i:i + batch], mode, opts=opts).astype(np.float64)
        yb = y[i:i + batch]
        z = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        total_loss += float((lse - z[np.arange(len(yb)), yb]).sum())
        correct += int((logits.argmax(axis=1) == yb).sum())
    return total_loss / len(x), correct / len(x)


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    layers: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["epoch", "loss", "train_acc", "val_acc", "lr", "wd"] + [f"zero_frac:{n}" for n in self.layers]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([r["epoch"], repr(r["loss"]), repr(r["train_acc"]), repr(r["val_acc"]), repr(r["lr"]),
                        repr(r["wd"])] + [repr(r["zero_frac"][n]) for n in self.layers])
        return buf.getvalue()

    def zero_fraction(self, epoch: int) -> dict[str, float]:
        return self.rows[epoch]["zero_frac"]


@dataclass
class TrainResult:
    arch: ArchSpec
    state: ParamState
    log: TrainLog
    config: TrainConfig
    final: dict = field(default_factory=dict)


def train(arch: ArchSpec, data: Dataset, cfg: TrainConfig = TrainConfig(), *, params=None,
          progress=None) -> TrainResult:
    """Train ``arch`` on ``data``. Row 0 of the log describes the initial
    weights; row ``e`` the state after epoch ``e``."""
    arch = prepare_arch(arch, cfg)
    if tuple(data.image_shape) != tuple(arch.input_shape):
        raise ValueError(f"dataset images {data.image_shape} do not fit input {arch.input_shape}")
    if data.num_classes > arch.num_classes:
        raise ValueError(f"{data.num_classes} classes but the classifier has {arch.num_classes} outputs")
    state = ParamState(init_params(arch, cfg.seed) if params is None else params)
    opts = QuantOptions(per_channel_pw=cfg.per_channel_pw)
    eval_mode = cfg.mode
    n = len(data.x_train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    order_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0x5EED])))
    log = TrainLog(layers=list(pointwise_zero_fractions(arch, state.params)))

    _, val_acc = evaluate(arch, state.params, data.x_val, data.y_val, eval_mode, opts, cfg.eval_batch)
    log.rows.append({"epoch": 0, "loss": float("nan"), "train_acc": float("nan"), "val_acc": val_acc,
                     "lr": cfg.lr0, "wd": cfg.weight_decay,
                     "zero_frac": pointwise_zero_fractions(arch, state.params, cfg.per_channel_pw)})
    for epoch in range(1, cfg.epochs + 1):
        perm = order_rng.permutation(n)
        loss_sum, correct = 0.0, 0
        lr = wd = 0.0
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = cosine_lr(state.step, total, cfg.lr0) if cfg.use_cosine else cfg.lr0
            wd = weight_decay_schedule(state.step, total, cfg)
            try:
                loss, grads, aux = loss_and_grads(arch, state.params, data.x_train[idx], data.y_train[idx],
                                                  cfg.mode, opts=opts, label_smoothing=cfg.label_smoothing)
            except NonFiniteError as e:
                raise TrainingDiverged(epoch, state.step, e.layer, e.what) from e
            for name, (rm, rv) in aux["bn_stats"].items():
                state.params[name]["running_mean"] = rm
                state.params[name]["running_var"] = rv
            sgd_step(state, grads, lr, cfg, wd)
            loss_sum += float(loss) * len(idx)
            correct += int((aux["logits"].argmax(axis=1) == data.y_train[idx]).sum())
        _, val_acc = evaluate(arch, state.params, data.x_val, data.y_val, eval_mode, opts, cfg.eval_batch)
        row = {"epoch": epoch, "loss": loss_sum / n, "train_acc": correct / n, "val_acc": val_acc,
               "lr": lr, "wd": wd, "zero_frac": pointwise_zero_fractions(arch, state.params, cfg.per_channel_pw)}
        log.rows.append(row)
        if progress is not None:
            progress(row)
    final = {"val_acc": log.rows[-1]["val_acc"]}
    if cfg.mode == "qat":
        _, final["val_acc_quantized"] = evaluate(arch, state.params, data.x_val, data.y_val,
                                                 "quantized_inference", opts, cfg.eval_batch)
    return TrainResult(arch, state, log, cfg, final)

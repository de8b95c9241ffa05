"""Training loop: FP32 master weights, SGD with momentum, mixed precision.

The solver state (weights, velocities, weight gradients) is FP32
throughout; quantized weight copies are refreshed from the masters after
every update, so the integer kernels always see Q_w of the current
weights.  Weight-gradient tensors themselves are never quantized.  There
is no loss scaling: error tensors are quantized with their own shared
exponent, which tracks their magnitude as gradients shrink.
"""

from __future__ import annotations

import dataclasses
import time
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .arith import Empirical, OverflowPolicy, Strict
from .layers import (AvgPool, BatchNorm, Conv, Dense, Flatten, Layer, MaxPool,
                     Model, Quantizers, ReLU, Residual, RunContext, to_fp32)
from .tensor import QuantConfig, rounding_from_name

# === configuration ===

_LAYER_TYPES = ("conv", "fc", "batchnorm", "relu", "maxpool", "avgpool",
                "flatten", "residual")


@dataclasses.dataclass
class TrainConfig:
    """Run configuration, loadable from a JSON dict."""

    layers: List[dict]
    loss: str = "softmax_xent"
    epochs: int = 1
    batch_size: int = 64
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_gamma: float = 0.1
    step_epochs: List[int] = dataclasses.field(default_factory=list)
    bit_width: int = 16
    pre_shift: int = 1
    rounding: str = "nearest"
    rounding_w: Optional[str] = None     # per-role overrides
    rounding_e: Optional[str] = None
    policy: str = "empirical"
    chain_block: int = 208
    max_chain: Optional[int] = None
    shadow_check: bool = False
    icblk: Optional[int] = None
    rb_size: int = 28

    def __post_init__(self):
        if self.loss not in ("softmax_xent", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.policy not in ("empirical", "strict"):
            raise ValueError(f"unknown overflow policy {self.policy!r}")
        if self.policy == "strict" and self.max_chain is None:
            raise ValueError("strict policy requires max_chain")
        for role, name in (("rounding", self.rounding),
                           ("rounding_w", self.rounding_w),
                           ("rounding_e", self.rounding_e)):
            if name is not None and name not in ("nearest", "stochastic",
                                                 "biased"):
                raise ValueError(f"unknown {role} mode {name!r}")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if not 2 <= self.bit_width <= 16:
            raise ValueError(f"bit_width must be in [2, 16], got {self.bit_width}")
        if not 0 <= self.pre_shift <= self.bit_width - 2:
            raise ValueError(
                f"pre_shift must be in [0, bit_width-2], got {self.pre_shift}")
        if self.rb_size <= 0 or (self.icblk is not None and self.icblk <= 0):
            raise ValueError("rb_size and icblk must be positive")
        if not self.layers:
            raise ValueError("config must list at least one layer")
        for spec in self.layers:
            if spec.get("type") not in _LAYER_TYPES:
                raise ValueError(f"unknown layer type {spec.get('type')!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def parse_config(raw: dict) -> TrainConfig:
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "layers" not in raw:
        raise ValueError("config must list at least one layer")
    return TrainConfig(**raw)


def make_policy(cfg: TrainConfig) -> OverflowPolicy:
    if cfg.policy == "strict":
        return Strict(max_chain=cfg.max_chain, shadow_check=cfg.shadow_check)
    return Empirical(chain_block=cfg.chain_block, shadow_check=cfg.shadow_check)


def make_quantizers(cfg: TrainConfig, seed: int) -> Quantizers:
    def qc(name: Optional[str]) -> QuantConfig:
        mode = rounding_from_name(name or cfg.rounding, seed=seed)
        return QuantConfig(bit_width=cfg.bit_width, rounding=mode,
                           pre_shift=cfg.pre_shift)

    # All three tensor kinds feed multiplier inputs, so all share pre_shift.
    return Quantizers(qc(None), qc(cfg.rounding_w), qc(cfg.rounding_e))


# === model construction ===


def build_model(cfg: TrainConfig, in_shape: Tuple[int, ...], ctx: RunContext,
                rng: np.random.Generator, precision: str = "dfp16") -> Model:
    """Instantiate the layer pipeline, tracking shapes for weight allocation.

    precision "fp32" forces every layer to the FP32 path; "dfp16" honors
    per-layer precision fields (default "dfp" for conv/fc/batchnorm).
    """
    if precision not in ("fp32", "dfp16"):
        raise ValueError(f"unknown precision mode {precision!r}")

    counters: Dict[str, int] = {}

    def fresh_name(kind: str) -> str:
        counters[kind] = counters.get(kind, 0) + 1
        return f"{kind}{counters[kind]}"

    def layer_precision(spec: dict) -> str:
        if precision == "fp32":
            return "fp32"
        return spec.get("precision", "dfp")

    def build(specs: List[dict], shape, first_conv_seen=[False]) -> Tuple[List[Layer], tuple]:
        out: List[Layer] = []
        for spec in specs:
            kind = spec["type"]
            if kind == "conv":
                if len(shape) != 3:
                    raise ValueError(f"conv requires CHW input, have {shape}")
                c, h, w = shape
                k = spec["kernel"]
                stride = spec.get("stride", 1)
                pad = spec.get("pad", 0)
                first = not first_conv_seen[0]
                first_conv_seen[0] = True
                layer = Conv(ctx, spec.get("name", fresh_name("conv")), c,
                             spec["out_ch"], k, stride, pad,
                             precision=layer_precision(spec),
                             bias=spec.get("bias", False), first=first, rng=rng)
                shape = (spec["out_ch"], (h + 2 * pad - k) // stride + 1,
                         (w + 2 * pad - k) // stride + 1)
            elif kind == "fc":
                feat = int(np.prod(shape))
                if len(shape) != 1:
                    raise ValueError(f"fc requires flattened input, have {shape}")
                layer = Dense(ctx, spec.get("name", fresh_name("fc")), feat,
                              spec["out_features"],
                              precision=layer_precision(spec),
                              bias=spec.get("bias", True), rng=rng)
                shape = (spec["out_features"],)
            elif kind == "batchnorm":
                layer = BatchNorm(ctx, spec.get("name", fresh_name("bn")),
                                  shape[0], precision=layer_precision(spec),
                                  eps=spec.get("eps", 1e-5),
                                  momentum=spec.get("momentum", 0.1))
            elif kind == "relu":
                layer = ReLU(ctx, spec.get("name", fresh_name("relu")))
            elif kind == "maxpool":
                k = spec["kernel"]
                layer = MaxPool(ctx, spec.get("name", fresh_name("pool")), k)
                shape = (shape[0], shape[1] // k, shape[2] // k)
            elif kind == "avgpool":
                k = spec["kernel"]
                layer = AvgPool(ctx, spec.get("name", fresh_name("pool")), k)
                shape = (shape[0], shape[1] // k, shape[2] // k)
            elif kind == "flatten":
                layer = Flatten(ctx, spec.get("name", fresh_name("flatten")))
                shape = (int(np.prod(shape)),)
            elif kind == "residual":
                body, bshape = build(spec["body"], shape, first_conv_seen)
                if bshape != shape:
                    raise ValueError(
                        f"residual body maps {shape} -> {bshape}; shapes must match")
                layer = Residual(ctx, spec.get("name", fresh_name("res")), body)
            else:  # pragma: no cover - rejected in TrainConfig
                raise ValueError(f"unknown layer type {kind!r}")
            out.append(layer)
        return out, shape

    # construction-time weight quantization runs in its own phase so the
    # initial q_w draws never share a stream with the first training step
    phase = ctx.q.phase
    ctx.q.phase = 2
    try:
        layers, _ = build(cfg.layers, tuple(in_shape))
        return Model(layers, ctx)
    finally:
        ctx.q.phase = phase


# === losses ===


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch; returns (loss, dloss/dlogits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    eps = np.float32(1e-30)
    loss = float(-np.log(p[np.arange(n), labels] + eps).mean())
    g = p.copy()
    g[np.arange(n), labels] -= np.float32(1.0)
    return loss, (g / np.float32(n)).astype(np.float32)


def mse(outputs: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean squared error over all elements; returns (loss, grad)."""
    targets = np.asarray(targets, np.float32).reshape(outputs.shape)
    diff = outputs - targets
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    return loss, (diff * np.float32(2.0 / diff.size)).astype(np.float32)


_LOSSES: Dict[str, Callable] = {"softmax_xent": softmax_xent, "mse": mse}


# === solver ===


def sgd_step(model: Model, lr: float, momentum: float, weight_decay: float) -> None:
    """FP32 SGD with momentum: v = m*v + (g + wd*w); w -= lr*v.

    Refreshes the quantized weight copies afterwards, so consumers always
    see Q_w of the updated masters.
    """
    lr32, m32, wd32 = np.float32(lr), np.float32(momentum), np.float32(weight_decay)
    for layer in model.iter_layers():
        params, grads, vel = layer.params(), layer.grads(), layer.velocities()
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                raise RuntimeError(f"{layer.name}.{name}: missing gradient")
            g = np.asarray(g, np.float32)
            if not np.all(np.isfinite(g)):
                raise TrainingDivergence(
                    f"non-finite gradient in {layer.name}.{name}", [])
            v = vel[name]
            if weight_decay:
                g = g + wd32 * p
            v[...] = m32 * v + g
            p[...] = p - lr32 * v
    model.refresh_quantized()


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: multiply base_lr by lr_gamma at each listed epoch."""
    drops = sum(1 for e in cfg.step_epochs if epoch >= e)
    return cfg.base_lr * (cfg.lr_gamma ** drops)


# === divergence reporting ===


class TrainingDivergence(RuntimeError):
    """Raised when the loss or a gradient goes non-finite.

    Carries per-layer activation summaries (name, min, max, finite fraction)
    from a replay of the failing batch for offline inspection.
    """

    def __init__(self, message: str, report: List[dict]):
        super().__init__(message)
        self.report = report


def _activation_report(model: Model, x: np.ndarray) -> List[dict]:
    trace: list = []
    model.forward(x, train=True, trace=trace)
    report = []
    for name, act in trace:
        arr = to_fp32(act).astype(np.float64)
        report.append({
            "layer": name,
            "min": float(arr.min()),
            "max": float(arr.max()),
            "finite_fraction": float(np.isfinite(arr).mean()),
        })
    return report


# === evaluation and the loop ===


def evaluate(model: Model, x: np.ndarray, y: np.ndarray, loss_name: str,
             batch_size: int, eval_tag: int = 0) -> float:
    """Validation metric: accuracy for classification, -MSE for regression
    (so that higher is always better in the metrics column)."""
    q = model.ctx.q
    phase, it = q.phase, q.iteration
    q.phase = 1
    try:
        loss_fn = _LOSSES[loss_name]
        correct = 0.0
        sq_sum, count = 0.0, 0
        n = x.shape[0]
        for b0 in range(0, n, batch_size):
            # distinct iteration tag per eval batch keeps tensor ids unique
            q.iteration = eval_tag * (1 << 20) + b0 // batch_size
            xb = x[b0: b0 + batch_size]
            yb = y[b0: b0 + batch_size]
            out = model.forward(xb, train=False)
            if loss_name == "softmax_xent":
                correct += float((out.argmax(axis=1) == yb).sum())
            else:
                l, _ = loss_fn(out, yb)
                sq_sum += l * out.size
                count += out.size
        if loss_name == "softmax_xent":
            return correct / n
        return -sq_sum / count
    finally:
        q.phase, q.iteration = phase, it


def train_loop(model: Model, cfg: TrainConfig, train_x: np.ndarray,
               train_y: np.ndarray, val_x: np.ndarray, val_y: np.ndarray,
               seed: int) -> List[dict]:
    """Run SGD for cfg.epochs; returns one metrics row per iteration.

    Row keys: iteration, epoch, train_loss, val_acc (empty except on each
    epoch's final iteration), overflow_count (cumulative), wall_ms.
    Shuffling uses a dedicated seeded stream, so a fixed seed fixes the
    batch schedule regardless of precision mode.
    """
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    loss_fn = _LOSSES[cfg.loss]
    q = model.ctx.q
    rows: List[dict] = []
    n = train_x.shape[0]
    bs = cfg.batch_size
    if n < bs:
        raise ValueError(f"training split ({n}) smaller than batch size ({bs})")
    iteration = 0
    batches = n // bs  # ragged tail dropped to keep batch shapes static
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        lr = lr_at(cfg, epoch)
        for b in range(batches):
            t0 = time.perf_counter()
            idx = perm[b * bs: (b + 1) * bs]
            xb, yb = train_x[idx], train_y[idx]
            q.phase, q.iteration = 0, iteration
            out = model.forward(xb, train=True)
            loss, dout = loss_fn(out, yb)
            if not np.isfinite(loss):
                raise TrainingDivergence(
                    f"non-finite loss {loss} at iteration {iteration}",
                    _activation_report(model, xb))
            model.backward(dout)
            sgd_step(model, lr, cfg.momentum, cfg.weight_decay)
            iteration += 1
            val = ""
            if b == batches - 1:
                val = evaluate(model, val_x, val_y, cfg.loss, bs, eval_tag=epoch)
            rows.append({
                "iteration": iteration,
                "epoch": epoch,
                "train_loss": loss,
                "val_acc": val,
                "overflow_count": model.ctx.stats.overflow_count,
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            })
    return rows

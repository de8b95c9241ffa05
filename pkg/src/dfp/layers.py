"""Mixed-precision network layers over the integer kernels.

Data flow per training step: each DFP compute layer consumes quantized
activations (Q_a) and quantized weights (Q_w), runs the integer kernels,
and produces an FP32 output; elementwise post-ops (ReLU, residual adds)
ride in FP32 and the result is re-quantized before the next DFP consumer.
On the way back, incoming FP32 output-gradients are quantized (Q_e) before
the integer backward kernels, while weight gradients stay FP32 end to end
and feed an FP32 solver over FP32 master weights.

Layers marked fp32 never quantize anything, so a model whose layers are all
fp32 is a plain FP32 trainer.  Max pooling operates directly on the integer
elements when its input is quantized (the shared exponent makes argmax
order-preserving); average pooling and batch-norm statistics are FP32.
"""

from __future__ import annotations

import dataclasses
from typing import Dict, List, Optional, Union

import numpy as np

from .arith import Empirical, OverflowPolicy
from .kernels import (BlockingParams, ConvSpec, KernelStats, conv_fprop,
                      default_blocking, gemm_dfp, pack_weights)
from .tensor import DfpTensor, QuantConfig, dequantize, quantize

Activation = Union[np.ndarray, DfpTensor]


def to_fp32(x: Activation) -> np.ndarray:
    if isinstance(x, DfpTensor):
        return dequantize(x)
    return np.asarray(x, dtype=np.float32)


# === quantizer bookkeeping ===


class Quantizers:
    """Q_a / Q_w / Q_e operators with event logging and stable tensor ids.

    Tensor ids are composed from (phase, iteration, layer slot, role) so
    stochastic rounding draws are unique per quantization event and
    independent of execution interleaving.
    """

    _ROLES = {"q_a": 0, "q_w": 1, "q_e": 2}

    def __init__(self, cfg_a: QuantConfig, cfg_w: QuantConfig, cfg_e: QuantConfig):
        self.cfg_a = cfg_a
        self.cfg_w = cfg_w
        self.cfg_e = cfg_e
        self.phase = 0       # 0 train, 1 eval, 2 weight init
        self.iteration = 0
        self.events: List[tuple] = []
        self._slots: Dict[str, int] = {}

    def _tid(self, layer: str, kind: str) -> int:
        slot = self._slots.setdefault(layer, len(self._slots))
        return (((self.phase << 40) + self.iteration) << 12 | slot) << 2 | self._ROLES[kind]

    def _apply(self, kind: str, layer: str, values, cfg: QuantConfig) -> DfpTensor:
        tid = self._tid(layer, kind)
        out = quantize(values, cfg, tensor_id=tid)
        self.events.append((kind, layer, tid))
        return out

    def q_a(self, layer: str, values) -> DfpTensor:
        return self._apply("q_a", layer, values, self.cfg_a)

    def q_w(self, layer: str, values) -> DfpTensor:
        return self._apply("q_w", layer, values, self.cfg_w)

    def q_e(self, layer: str, values) -> DfpTensor:
        return self._apply("q_e", layer, values, self.cfg_e)


@dataclasses.dataclass
class RunContext:
    """Shared per-run state: quantizers, kernel policy, counters."""

    q: Quantizers
    policy: OverflowPolicy = dataclasses.field(default_factory=Empirical)
    engine: str = "fast"
    icblk: Optional[int] = None    # explicit chain-block override
    rb_size: int = 28
    stats: KernelStats = dataclasses.field(default_factory=KernelStats)

    def blocking_for(self, spec: ConvSpec) -> BlockingParams:
        if self.icblk is not None:
            return BlockingParams(icblk=self.icblk, rb_size=self.rb_size)
        return default_blocking(spec, self.policy, rb_size=self.rb_size)


# === FP32 convolution helpers (im2col formulation) ===


def _f32_cols(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    n = x.shape[0]
    s = spec.stride
    xp = np.zeros((n, spec.in_ch, spec.h + 2 * spec.pad, spec.w + 2 * spec.pad), np.float32)
    xp[:, :, spec.pad: spec.pad + spec.h, spec.pad: spec.pad + spec.w] = x
    cols = np.empty((n, spec.oh, spec.ow, spec.in_ch, spec.kh, spec.kw), np.float32)
    for r in range(spec.kh):
        for t in range(spec.kw):
            view = xp[:, :, r: r + s * (spec.oh - 1) + 1: s, t: t + s * (spec.ow - 1) + 1: s]
            cols[:, :, :, :, r, t] = view.transpose(0, 2, 3, 1)
    return cols.reshape(n * spec.oh * spec.ow, -1)


def _f32_col2im(dcols: np.ndarray, spec: ConvSpec, n: int) -> np.ndarray:
    s = spec.stride
    dpad = np.zeros((n, spec.in_ch, spec.h + 2 * spec.pad, spec.w + 2 * spec.pad), np.float32)
    d = dcols.reshape(n, spec.oh, spec.ow, spec.in_ch, spec.kh, spec.kw)
    for r in range(spec.kh):
        for t in range(spec.kw):
            dpad[:, :, r: r + s * (spec.oh - 1) + 1: s,
                 t: t + s * (spec.ow - 1) + 1: s] += d[:, :, :, :, r, t].transpose(0, 3, 1, 2)
    return dpad[:, :, spec.pad: spec.pad + spec.h, spec.pad: spec.pad + spec.w]


def _dfp_patch_matrix(a: DfpTensor, spec: ConvSpec) -> DfpTensor:
    # Integer im2col with plain (c, kh, kw) column order, for the weight
    # gradient GEMM whose output maps back onto (K, C, KH, KW).
    el = a.elements
    n = el.shape[0]
    s = spec.stride
    xp = np.zeros((n, spec.in_ch, spec.h + 2 * spec.pad, spec.w + 2 * spec.pad), np.int16)
    xp[:, :, spec.pad: spec.pad + spec.h, spec.pad: spec.pad + spec.w] = el
    cols = np.empty((n, spec.oh, spec.ow, spec.in_ch, spec.kh, spec.kw), np.int16)
    for r in range(spec.kh):
        for t in range(spec.kw):
            view = xp[:, :, r: r + s * (spec.oh - 1) + 1: s, t: t + s * (spec.ow - 1) + 1: s]
            cols[:, :, :, :, r, t] = view.transpose(0, 2, 3, 1)
    mat = cols.reshape(n * spec.oh * spec.ow, spec.in_ch * spec.kh * spec.kw)
    return DfpTensor(mat, a.shared_exponent, a.bit_width)


def _dilate_errors(e: DfpTensor, stride: int) -> DfpTensor:
    if stride == 1:
        return e
    n, k, oh, ow = e.elements.shape
    d = np.zeros((n, k, (oh - 1) * stride + 1, (ow - 1) * stride + 1), np.int16)
    d[:, :, ::stride, ::stride] = e.elements
    return DfpTensor(d, e.shared_exponent, e.bit_width)


# === layers ===


class Layer:
    """Base layer; precision is "dfp", "fp32", or None for transparent ops."""

    precision: Optional[str] = None

    def __init__(self, ctx: RunContext, name: str):
        self.ctx = ctx
        self.name = name

    def forward(self, x: Activation, train: bool) -> Activation:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> Dict[str, np.ndarray]:
        return {}

    def grads(self) -> Dict[str, np.ndarray]:
        return {}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def velocities(self) -> Dict[str, np.ndarray]:
        return {}

    def refresh_quantized(self) -> None:
        pass

    def iter_layers(self):
        yield self


class Conv(Layer):
    """2D convolution; FP32 master weights, optionally a DFP compute path."""

    def __init__(self, ctx, name, in_ch, out_ch, kernel, stride=1, pad=0,
                 precision="dfp", bias=False, first=False, rng=None):
        super().__init__(ctx, name)
        self.precision = precision
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kh = self.kw = kernel
        self.stride, self.pad = stride, pad
        self.first = first  # the input layer skips the input-gradient pass
        fan_in = in_ch * kernel * kernel
        std = float(np.sqrt(2.0 / fan_in))
        self.W = (rng.standard_normal((out_ch, in_ch, kernel, kernel)) * std).astype(np.float32)
        self.b = np.zeros(out_ch, np.float32) if bias else None
        self._vel = {k: np.zeros_like(v) for k, v in self.params().items()}
        self.w_q: Optional[DfpTensor] = None
        self.gW = None
        self.gb = None

    def params(self):
        p = {"W": self.W}
        if self.b is not None:
            p["b"] = self.b
        return p

    def grads(self):
        g = {"W": self.gW}
        if self.b is not None:
            g["b"] = self.gb
        return g

    def velocities(self):
        return self._vel

    def refresh_quantized(self):
        if self.precision == "dfp":
            self.w_q = self.ctx.q.q_w(self.name, self.W)

    def _spec(self, h, w) -> ConvSpec:
        return ConvSpec(self.in_ch, self.out_ch, h, w, self.kh, self.kw,
                        self.stride, self.pad)

    def forward(self, x, train):
        if self.precision == "dfp":
            a_q = x if isinstance(x, DfpTensor) else self.ctx.q.q_a(self.name, to_fp32(x))
            spec = self._spec(a_q.shape[2], a_q.shape[3])
            if self.w_q is None:
                self.refresh_quantized()
            pw = pack_weights(self.w_q, spec)
            out, st = conv_fprop(a_q, pw, spec, self.ctx.blocking_for(spec),
                                 self.ctx.policy, self.ctx.engine)
            self.ctx.stats.merge(st)
            self._a_q, self._xf, self._spec_cache = a_q, None, spec
        else:
            xf = to_fp32(x)
            spec = self._spec(xf.shape[2], xf.shape[3])
            cols = _f32_cols(xf, spec)
            wmat = self.W.reshape(self.out_ch, -1)
            out = (cols @ wmat.T).reshape(xf.shape[0], spec.oh, spec.ow, self.out_ch)
            out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
            self._a_q, self._cols, self._spec_cache = None, cols, spec
        if self.b is not None:
            out = out + self.b.reshape(1, -1, 1, 1)
        return out

    def backward(self, g):
        spec = self._spec_cache
        if spec is None:
            raise RuntimeError(f"{self.name}: backward before forward")
        g = np.asarray(g, np.float32)
        n = g.shape[0]
        if self.b is not None:
            self.gb = g.sum(axis=(0, 2, 3))
        if self.precision == "dfp":
            e_q = self.ctx.q.q_e(self.name, g)
            # Weight gradient: GEMM over the minibatch x spatial reduction,
            # chunked like any other chain; output stays FP32 (never quantized).
            e_mat = DfpTensor(
                np.ascontiguousarray(e_q.elements.transpose(1, 0, 2, 3)).reshape(self.out_ch, -1),
                e_q.shared_exponent, e_q.bit_width)
            a_cols = _dfp_patch_matrix(self._a_q, spec)
            wu_spec = ConvSpec(in_ch=e_mat.shape[1], out_ch=a_cols.shape[1], h=1, w=1, kh=1, kw=1)
            dw, st = gemm_dfp(e_mat, a_cols, self.ctx.blocking_for(wu_spec),
                              self.ctx.policy, self.ctx.engine)
            self.ctx.stats.merge(st)
            self.gW = dw.reshape(self.out_ch, self.in_ch, self.kh, self.kw)
            if self.first:
                return np.zeros((n, self.in_ch, spec.h, spec.w), np.float32)
            # Input gradient: convolve dilated errors with the flipped,
            # channel-transposed quantized weights.
            if self.pad > self.kh - 1 or self.pad > self.kw - 1:
                raise ValueError(f"{self.name}: pad larger than kernel-1 unsupported in backward")
            ed = _dilate_errors(e_q, self.stride)
            wf = DfpTensor(
                np.ascontiguousarray(
                    self.w_q.elements[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)),
                self.w_q.shared_exponent, self.w_q.bit_width)
            bspec = ConvSpec(self.out_ch, self.in_ch, ed.shape[2], ed.shape[3],
                             self.kh, self.kw, 1, self.kh - 1 - self.pad)
            pw = pack_weights(wf, bspec)
            gin, st = conv_fprop(ed, pw, bspec, self.ctx.blocking_for(bspec),
                                 self.ctx.policy, self.ctx.engine)
            self.ctx.stats.merge(st)
            return gin
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, self.out_ch)
        wmat = self.W.reshape(self.out_ch, -1)
        self.gW = (g_mat.T @ self._cols).reshape(self.W.shape)
        if self.first:
            return np.zeros((n, self.in_ch, spec.h, spec.w), np.float32)
        return _f32_col2im(g_mat @ wmat, spec, n)


class Dense(Layer):
    """Fully connected layer with FP32 bias."""

    def __init__(self, ctx, name, in_features, out_features, precision="fp32",
                 bias=True, rng=None):
        super().__init__(ctx, name)
        self.precision = precision
        self.in_features, self.out_features = in_features, out_features
        std = float(np.sqrt(2.0 / in_features))
        self.W = (rng.standard_normal((out_features, in_features)) * std).astype(np.float32)
        self.b = np.zeros(out_features, np.float32) if bias else None
        self._vel = {k: np.zeros_like(v) for k, v in self.params().items()}
        self.w_q: Optional[DfpTensor] = None
        self.gW = None
        self.gb = None

    def params(self):
        p = {"W": self.W}
        if self.b is not None:
            p["b"] = self.b
        return p

    def grads(self):
        g = {"W": self.gW}
        if self.b is not None:
            g["b"] = self.gb
        return g

    def velocities(self):
        return self._vel

    def refresh_quantized(self):
        if self.precision == "dfp":
            self.w_q = self.ctx.q.q_w(self.name, self.W)

    def forward(self, x, train):
        if isinstance(x, DfpTensor) and x.elements.ndim != 2:
            raise ValueError(f"{self.name}: expected flattened input, got shape {x.shape}")
        if self.precision == "dfp":
            a_q = x if isinstance(x, DfpTensor) else self.ctx.q.q_a(self.name, to_fp32(x))
            if self.w_q is None:
                self.refresh_quantized()
            wt = DfpTensor(np.ascontiguousarray(self.w_q.elements.T),
                           self.w_q.shared_exponent, self.w_q.bit_width)
            out, st = gemm_dfp(a_q, wt, policy=self.ctx.policy, engine=self.ctx.engine)
            self.ctx.stats.merge(st)
            self._a_q, self._xf = a_q, None
        else:
            xf = to_fp32(x)
            if xf.ndim != 2:
                raise ValueError(f"{self.name}: expected flattened input, got shape {xf.shape}")
            out = xf @ self.W.T
            self._a_q, self._xf = None, xf
        if self.b is not None:
            out = out + self.b
        return out

    def backward(self, g):
        g = np.asarray(g, np.float32)
        if self.b is not None:
            self.gb = g.sum(axis=0)
        if self.precision == "dfp":
            e_q = self.ctx.q.q_e(self.name, g)
            e_t = DfpTensor(np.ascontiguousarray(e_q.elements.T),
                            e_q.shared_exponent, e_q.bit_width)
            dw, st = gemm_dfp(e_t, self._a_q, policy=self.ctx.policy, engine=self.ctx.engine)
            self.ctx.stats.merge(st)
            self.gW = dw
            gin, st = gemm_dfp(e_q, self.w_q, policy=self.ctx.policy, engine=self.ctx.engine)
            self.ctx.stats.merge(st)
            return gin
        self.gW = g.T @ self._xf
        return g @ self.W


class BatchNorm(Layer):
    """Batch normalization with FP32 statistics and FP32 scale/shift.

    Quantized inputs are up-converted before the mean/variance reduction;
    gamma and beta live with the FP32 master weights and are never
    quantized.  Running statistics use the biased batch variance.
    """

    def __init__(self, ctx, name, channels, precision="dfp", eps=1e-5, momentum=0.1):
        super().__init__(ctx, name)
        self.precision = precision
        self.channels = channels
        self.eps = np.float32(eps)
        self.momentum = np.float32(momentum)
        self.gamma = np.ones(channels, np.float32)
        self.beta = np.zeros(channels, np.float32)
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self._vel = {"gamma": np.zeros_like(self.gamma), "beta": np.zeros_like(self.beta)}
        self.ggamma = None
        self.gbeta = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.ggamma, "beta": self.gbeta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def velocities(self):
        return self._vel

    def _shape(self, xf):
        if xf.ndim == 2:
            return (0,), (1, -1)
        if xf.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        raise ValueError(f"{self.name}: rank {xf.ndim} input unsupported")

    def forward(self, x, train):
        if self.precision == "dfp" and not isinstance(x, DfpTensor):
            x = self.ctx.q.q_a(self.name, to_fp32(x))
        xf = to_fp32(x)
        axes, bshape = self._shape(xf)
        if train:
            if xf.shape[0] < 2:
                raise ValueError(f"{self.name}: training batch must have >= 2 samples")
            mu = xf.mean(axis=axes)
            var = xf.var(axis=axes)
            one = np.float32(1.0)
            self.running_mean[...] = (one - self.momentum) * self.running_mean + self.momentum * mu
            self.running_var[...] = (one - self.momentum) * self.running_var + self.momentum * var
        else:
            mu, var = self.running_mean, self.running_var
        inv = np.float32(1.0) / np.sqrt(var + self.eps)
        xhat = (xf - mu.reshape(bshape)) * inv.reshape(bshape)
        out = self.gamma.reshape(bshape) * xhat + self.beta.reshape(bshape)
        self._xhat, self._inv, self._axes, self._bshape = xhat, inv, axes, bshape
        self._m = xf.size // xf.shape[1] if xf.ndim == 4 else xf.shape[0]
        return out

    def backward(self, g):
        g = np.asarray(g, np.float32)
        axes, bshape = self._axes, self._bshape
        self.gbeta = g.sum(axis=axes)
        self.ggamma = (g * self._xhat).sum(axis=axes)
        m = np.float32(self._m)
        coef = (self.gamma * self._inv / m).reshape(bshape)
        return coef * (m * g - self.gbeta.reshape(bshape)
                       - self._xhat * self.ggamma.reshape(bshape))


class ReLU(Layer):
    """max(0, x); exact on quantized inputs since zero is representable."""

    def forward(self, x, train):
        if isinstance(x, DfpTensor):
            self._mask = x.elements > 0
            return DfpTensor(np.maximum(x.elements, 0), x.shared_exponent, x.bit_width)
        xf = to_fp32(x)
        self._mask = xf > 0
        return xf * self._mask

    def backward(self, g):
        return np.asarray(g, np.float32) * self._mask


class MaxPool(Layer):
    """Non-overlapping max pooling; runs directly on integer elements for
    quantized inputs (argmax is order-preserving under a shared exponent)."""

    def __init__(self, ctx, name, kernel):
        super().__init__(ctx, name)
        self.k = kernel

    def _windows(self, arr):
        n, c, h, w = arr.shape
        k = self.k
        if h % k or w % k:
            raise ValueError(f"{self.name}: input {h}x{w} not divisible by pool {k}")
        r = arr.reshape(n, c, h // k, k, w // k, k)
        return np.ascontiguousarray(r.transpose(0, 1, 2, 4, 3, 5)).reshape(
            n, c, h // k, w // k, k * k)

    def forward(self, x, train):
        arr = x.elements if isinstance(x, DfpTensor) else to_fp32(x)
        win = self._windows(arr)
        self._idx = win.argmax(axis=-1)
        self._in_shape = arr.shape
        out = np.take_along_axis(win, self._idx[..., None], axis=-1)[..., 0]
        if isinstance(x, DfpTensor):
            return DfpTensor(out, x.shared_exponent, x.bit_width)
        return out

    def backward(self, g):
        g = np.asarray(g, np.float32)
        n, c, h, w = self._in_shape
        k = self.k
        z = np.zeros((n, c, h // k, w // k, k * k), np.float32)
        np.put_along_axis(z, self._idx[..., None], g[..., None], axis=-1)
        z = z.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return np.ascontiguousarray(z).reshape(n, c, h, w)


class AvgPool(Layer):
    """Non-overlapping average pooling; always up-converts to FP32."""

    def __init__(self, ctx, name, kernel):
        super().__init__(ctx, name)
        self.k = kernel

    def forward(self, x, train):
        xf = to_fp32(x)
        n, c, h, w = xf.shape
        k = self.k
        if h % k or w % k:
            raise ValueError(f"{self.name}: input {h}x{w} not divisible by pool {k}")
        self._in_shape = xf.shape
        return xf.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(self, g):
        g = np.asarray(g, np.float32)
        n, c, h, w = self._in_shape
        k = self.k
        scale = np.float32(1.0 / (k * k))
        g = (g * scale)[:, :, :, None, :, None]
        return np.broadcast_to(g, (n, c, h // k, k, w // k, k)).reshape(n, c, h, w)


class Flatten(Layer):
    def forward(self, x, train):
        if isinstance(x, DfpTensor):
            self._in_shape = x.shape
            return DfpTensor(x.elements.reshape(x.shape[0], -1),
                             x.shared_exponent, x.bit_width)
        xf = to_fp32(x)
        self._in_shape = xf.shape
        return xf.reshape(xf.shape[0], -1)

    def backward(self, g):
        return np.asarray(g, np.float32).reshape(self._in_shape)


class Residual(Layer):
    """y = x + body(x); the skip connection is added in FP32 before any
    re-quantization of the block output."""

    def __init__(self, ctx, name, body: List[Layer]):
        super().__init__(ctx, name)
        self.body = body
        self.precision = next(
            (l.precision for l in body if l.precision is not None), None)

    def iter_layers(self):
        yield self
        for l in self.body:
            yield from l.iter_layers()

    def refresh_quantized(self):
        for l in self.body:
            l.refresh_quantized()

    def forward(self, x, train):
        x0 = to_fp32(x)
        y = x
        for l in self.body:
            y = l.forward(y, train)
        return x0 + to_fp32(y)

    def backward(self, g):
        g = np.asarray(g, np.float32)
        gb = g
        for l in reversed(self.body):
            gb = l.backward(gb)
        return gb + g


# === model container ===


class Model:
    """A layer pipeline with the quantization boundaries compiled in.

    An activation is re-quantized after the producing stage (post-ReLU, in
    FP32) whenever the next compute layer downstream runs in DFP; pooling
    between the two then operates on integer elements.  Layers also
    self-quantize FP32 inputs as a fallback, so every FP32 -> DFP boundary
    quantizes exactly once.
    """

    def __init__(self, layers: List[Layer], ctx: RunContext):
        self.layers = layers
        self.ctx = ctx
        self._plan = self._compile_boundaries()
        self.refresh_quantized()

    def _compile_boundaries(self) -> List[bool]:
        def first_compute(j: int) -> Optional[str]:
            while j < len(self.layers):
                if self.layers[j].precision is not None:
                    return self.layers[j].precision
                j += 1
            return None

        plan = []
        for i in range(len(self.layers)):
            nxt = self.layers[i + 1] if i + 1 < len(self.layers) else None
            defer = isinstance(nxt, ReLU)  # post-ops ride FP32 until after ReLU
            plan.append(not defer and nxt is not None and first_compute(i + 1) == "dfp")
        return plan

    def iter_layers(self):
        for l in self.layers:
            yield from l.iter_layers()

    def refresh_quantized(self):
        for l in self.layers:
            l.refresh_quantized()

    def forward(self, x: np.ndarray, train: bool = True, trace: Optional[list] = None):
        act: Activation = np.asarray(x, dtype=np.float32)
        for i, l in enumerate(self.layers):
            act = l.forward(act, train)
            if self._plan[i] and not isinstance(act, DfpTensor):
                act = self.ctx.q.q_a(l.name + ".out", act)
            if trace is not None:
                trace.append((l.name, act))
        return to_fp32(act)

    def backward(self, g: np.ndarray) -> np.ndarray:
        for l in reversed(self.layers):
            g = l.backward(g)
        return g

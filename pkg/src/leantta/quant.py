"""Post-training int8 quantization with partial conv/linear + norm fusion.

Scheme: per-tensor affine quantization, unsigned 8-bit activations with a zero
point and symmetric signed 8-bit weights (zero point 0). Integer layers
accumulate ``(x_q - x_zp) * w_q`` plus a bias quantized at ``x_scale * w_scale``,
then requantize with a double-precision rescale rounded half to even.

Normalization layers in the plan's unfused set stay as float islands: the
incoming uint8 activation is dequantized, normalized (optionally adapted) in
float, and requantized with the calibrated parameters of its output edge. All
other norm layers are folded into the preceding conv/linear layer before
weight quantization.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from leantta import _backend, graph
from leantta.adapt import NormParams, adaptive_normalize, normalize
from leantta.container import Reader, Writer
from leantta.errors import ConfigError, FormatError, NumericError, ShapeError, VersionError
from leantta.graph import LayerKind, LayerSpec, ModelGraph
from leantta.profiling import adapt_extra_ops, conv_mults, frozen_norm_ops, linear_mults

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-8
U8 = (0, 255)
I8 = (-128, 127)
INT32 = (-(2**31), 2**31 - 1)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0
    signed: bool = False
    bits: int = 8

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ConfigError(f"quantization scale must be positive and finite, got {self.scale}")
        if self.bits != 8:
            raise ConfigError("only 8-bit quantization is supported")
        lo, hi = self.qrange
        if not lo <= self.zero_point <= hi:
            raise ConfigError(f"zero point {self.zero_point} outside [{lo}, {hi}]")
        if self.signed and self.zero_point != 0:
            raise ConfigError("symmetric (signed) quantization requires zero point 0")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "zero_point", int(self.zero_point))

    @property
    def qrange(self):
        return I8 if self.signed else U8

    @property
    def dtype(self):
        return np.int8 if self.signed else np.uint8

    def to_dict(self):
        return {"scale": self.scale, "zero_point": self.zero_point, "signed": self.signed}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["scale"]), int(d["zero_point"]), bool(d.get("signed", False)))


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    q: np.ndarray
    qp: QuantParams


def activation_qparams(lo, hi):
    """Asymmetric uint8 parameters covering ``[min(lo, 0), max(hi, 0)]``.

    Returns ``(qp, degenerate)``; a zero-width range gets the scale floor.
    """
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    span = hi - lo
    degenerate = span <= 0.0
    scale = SCALE_FLOOR if degenerate else max(span / (U8[1] - U8[0]), SCALE_FLOOR)
    zp = int(np.clip(np.rint(-lo / scale), *U8))
    return QuantParams(scale, zp, signed=False), degenerate


def weight_qparams(w):
    """Symmetric int8 parameters, ``scale = max|w| / 127``."""
    amax = float(np.max(np.abs(w))) if np.size(w) else 0.0
    return QuantParams(max(amax / I8[1], SCALE_FLOOR), 0, signed=True)


def quantize_tensor(x, qp):
    """``clamp(round_half_even(x / scale) + zero_point)`` into the type range."""
    q = np.rint(np.asarray(x, dtype=np.float64) / qp.scale) + qp.zero_point
    return QuantizedTensor(np.clip(q, *qp.qrange).astype(qp.dtype), qp)


def dequantize_tensor(qt):
    """Real values ``(q - zero_point) * scale`` as float64."""
    return (qt.q.astype(np.float64) - qt.qp.zero_point) * qt.qp.scale


class Observer:
    """Running min / max over every value seen."""

    def __init__(self):
        self.min = math.inf
        self.max = -math.inf
        self.count = 0

    def update(self, x):
        x = np.asarray(x)
        if x.size == 0:
            return
        self.min = min(self.min, float(x.min()))
        self.max = max(self.max, float(x.max()))
        self.count += x.size

    def qparams(self):
        if self.count == 0:
            raise ConfigError("observer saw no data")
        return activation_qparams(self.min, self.max)


def edge_key(layer_id):
    """Name of the activation edge leaving ``layer_id`` (``None`` = model input)."""
    return "input" if layer_id is None else str(int(layer_id))


@dataclass
class Calibration:
    activations: dict
    weights: dict
    degenerate: list = field(default_factory=list)
    batches: int = 0
    batch_size: int = 0
    samples: int = 0

    def activation(self, layer_id):
        key = edge_key(layer_id)
        try:
            return self.activations[key]
        except KeyError:
            raise ConfigError(f"missing quantization parameters for activation edge {key!r}") from None

    def to_json(self):
        return json.dumps(
            {
                "schema_version": 1,
                "batches": self.batches,
                "batch_size": self.batch_size,
                "samples": self.samples,
                "degenerate": self.degenerate,
                "activations": {k: v.to_dict() for k, v in self.activations.items()},
                "weights": {k: v.to_dict() for k, v in self.weights.items()},
            },
            indent=1,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
            return cls(
                {k: QuantParams.from_dict(v) for k, v in d["activations"].items()},
                {k: QuantParams.from_dict(v) for k, v in d["weights"].items()},
                list(d.get("degenerate", [])),
                int(d.get("batches", 0)),
                int(d.get("batch_size", 0)),
                int(d.get("samples", 0)),
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"malformed calibration file: {exc}") from None


def _iter_batches(calib_data, input_shape, batches, batch_size):
    want = batches * batch_size
    if isinstance(calib_data, np.ndarray):
        chunks = [calib_data]
    else:
        chunks = calib_data
    buf = []
    have = 0
    for chunk in chunks:
        chunk = np.asarray(chunk, dtype=np.float32)
        if chunk.shape == tuple(input_shape):
            chunk = chunk[None]
        if chunk.shape[1:] != tuple(input_shape):
            raise ShapeError(f"calibration sample shape {chunk.shape[1:]} != model input {tuple(input_shape)}")
        buf.append(chunk[: want - have])
        have += len(buf[-1])
        if have >= want:
            break
    if have == 0:
        raise ConfigError("empty calibration stream")
    data = np.concatenate(buf)
    for start in range(0, len(data), batch_size):
        yield data[start:start + batch_size]


def calibrate(model, calib_data, batches=20, batch_size=32):
    """Observe every activation edge of ``model`` under frozen inference."""
    if batches < 1 or batch_size < 1:
        raise ConfigError("batches and batch_size must be >= 1")
    observers = {edge_key(None): Observer()}
    observers.update({edge_key(i): Observer() for i in range(len(model.layers))})
    n_batches = samples = 0
    for batch in _iter_batches(calib_data, model.input_shape, batches, batch_size):
        _, trace = graph.forward(model, batch, graph.SOURCE, trace=True)
        observers["input"].update(batch)
        for i, act in enumerate(trace.activations):
            observers[edge_key(i)].update(act)
        n_batches += 1
        samples += len(batch)
    activations, degenerate = {}, []
    for key, obs in observers.items():
        qp, flat = obs.qparams()
        activations[key] = qp
        if flat:
            degenerate.append(key)
    if degenerate:
        log.warning("constant activation on edges %s; scale floored to %g", degenerate, SCALE_FLOOR)
    weights = {
        str(i): weight_qparams(layer.weights)
        for i, layer in enumerate(model.layers)
        if layer.kind in (LayerKind.CONV2D, LayerKind.LINEAR)
    }
    return Calibration(activations, weights, degenerate, n_batches, batch_size, samples)


# -- fusion ----------------------------------------------------------------------


def fold_norm(weights, bias, norm):
    """Float64 weights and bias of a conv/linear layer with ``norm`` folded in."""
    w = np.asarray(weights, dtype=np.float64)
    if norm.channels != w.shape[0]:
        raise ShapeError(f"norm has {norm.channels} channels, layer has {w.shape[0]} outputs")
    s = norm.gamma.astype(np.float64) / np.sqrt(norm.sigma2_s.astype(np.float64) + norm.eps)
    w_f = w * s.reshape((-1,) + (1,) * (w.ndim - 1))
    b_f = norm.beta.astype(np.float64) + (np.asarray(bias, dtype=np.float64) - norm.mu_s.astype(np.float64)) * s
    return w_f, b_f


def fuse_conv_bn(conv, bn):
    """One conv (or linear) layer equivalent to ``conv`` followed by frozen ``bn``."""
    if conv.kind not in (LayerKind.CONV2D, LayerKind.LINEAR):
        raise ConfigError(f"cannot fuse a norm into a {conv.kind.name} layer")
    w, b = fold_norm(conv.weights, conv.bias, bn)
    if conv.kind is LayerKind.LINEAR:
        return LayerSpec.fc(w, b)
    return LayerSpec.conv(w, b, conv.stride, conv.padding)


@dataclass(frozen=True)
class FusionPlan:
    unfused: tuple
    fused: tuple

    def __post_init__(self):
        object.__setattr__(self, "unfused", tuple(sorted(int(i) for i in self.unfused)))
        object.__setattr__(self, "fused", tuple(sorted(int(i) for i in self.fused)))
        if set(self.unfused) & set(self.fused):
            raise ConfigError("a norm layer cannot be both fused and unfused")

    def describe(self):
        return f"unfused={list(self.unfused)} fused={list(self.fused)}"


POLICIES = ("all", "none", "deep-half")


def parse_policy(text):
    """``all`` | ``none`` | ``deep-half`` | ``explicit:<id,id,...>``."""
    if text in POLICIES:
        return text
    if text.startswith("explicit:"):
        body = text[len("explicit:"):].strip()
        try:
            return tuple(int(t) for t in body.split(",") if t.strip())
        except ValueError:
            raise ConfigError(f"bad explicit fusion id list {body!r}") from None
    raise ConfigError(f"unknown fusion policy {text!r}; expected all, none, deep-half or explicit:<ids>")


def plan_partial_fusion(model, policy="deep-half"):
    """Choose the unfused (adaptive) set; ``deep-half`` keeps the shallowest ceil(L/2)."""
    norm_ids = model.norm_layer_ids()
    if not norm_ids:
        raise ConfigError("model has no normalization layers")
    if isinstance(policy, str):
        policy = parse_policy(policy)
    if policy == "all":
        unfused = []
    elif policy == "none":
        unfused = list(norm_ids)
    elif policy == "deep-half":
        unfused = norm_ids[: math.ceil(len(norm_ids) / 2)]
    else:
        unfused = sorted(set(int(i) for i in policy))
        unknown = set(unfused) - set(norm_ids)
        if unknown:
            raise ConfigError(f"explicit fusion ids {sorted(unknown)} are not normalization layers {norm_ids}")
    return FusionPlan(tuple(unfused), tuple(i for i in norm_ids if i not in unfused))


# -- quantized model -------------------------------------------------------------


class QOp:
    CONV = 1
    LINEAR = 2
    NORM_ISLAND = 3
    RELU = 4
    POOL = 5
    RES_BEGIN = 6
    RES_END = 7

    NAMES = {1: "QCONV", 2: "QLINEAR", 3: "NORM_ISLAND", 4: "QRELU", 5: "QPOOL", 6: "QRES_BEGIN", 7: "QRES_END"}


@dataclass(frozen=True, eq=False)
class QuantOp:
    """One step of the integer executor.

    ``source_ids`` are the float-graph layers this op implements. For weight
    ops ``relu`` folds a following ReLU into the requantization clamp and
    ``float_out`` returns dequantized accumulators instead of uint8.
    """

    kind: int
    in_qp: QuantParams
    out_qp: QuantParams
    source_ids: tuple = ()
    wq: Optional[np.ndarray] = None
    w_scale: float = 1.0
    bias_q: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0
    relu: bool = False
    float_out: bool = False
    norm: Optional[NormParams] = None
    adaptive: bool = False


@dataclass(frozen=True, eq=False)
class QuantizedModel:
    ops: tuple
    input_qp: QuantParams
    input_shape: tuple
    num_classes: int
    plan: FusionPlan
    name: str = "model"

    def island_ids(self):
        return [op.source_ids[0] for op in self.ops if op.kind == QOp.NORM_ISLAND]


def _quantize_weights(w, b, in_qp):
    wqp = weight_qparams(w)
    wq = np.clip(np.rint(np.asarray(w, dtype=np.float64) / wqp.scale), *I8).astype(np.int8)
    bias_scale = in_qp.scale * wqp.scale
    bq = np.rint(np.asarray(b, dtype=np.float64) / bias_scale)
    if (bq < INT32[0]).any() or (bq > INT32[1]).any():
        raise NumericError("quantized bias overflows int32")
    return wq, wqp.scale, bq.astype(np.int32)


def quantize_model(model, plan, calib):
    """Fuse, quantize and lower ``model`` into an integer op list per ``plan``."""
    norm_ids = set(model.norm_layer_ids())
    if set(plan.unfused) | set(plan.fused) != norm_ids:
        raise ConfigError(f"fusion plan {plan.describe()} does not cover norm layers {sorted(norm_ids)}")
    layers = model.layers
    n = len(layers)
    ops = []
    cur_qp = calib.activation(None)
    input_qp = cur_qp
    i = 0
    while i < n:
        layer = layers[i]
        k = layer.kind
        if k in (LayerKind.CONV2D, LayerKind.LINEAR):
            src = [i]
            w, b = layer.weights, layer.bias
            if i + 1 < n and layers[i + 1].is_norm and i + 1 in plan.fused:
                w, b = fold_norm(w, b, layers[i + 1].norm)
                src.append(i + 1)
            relu = src[-1] + 1 < n and layers[src[-1] + 1].kind is LayerKind.RELU
            if relu:
                src.append(src[-1] + 1)
            out_qp = calib.activation(src[-1])
            wq, w_scale, bq = _quantize_weights(w, b, cur_qp)
            kind = QOp.CONV if k is LayerKind.CONV2D else QOp.LINEAR
            ops.append(QuantOp(kind, cur_qp, out_qp, tuple(src), wq=wq, w_scale=w_scale, bias_q=bq,
                               stride=layer.stride, padding=layer.padding, relu=relu))
            cur_qp = out_qp
            i = src[-1] + 1
            continue
        if k in graph.NORM_KINDS:
            if i in plan.fused:
                log.warning("norm layer %d has no preceding conv/linear; kept as a frozen float island", i)
            src = [i]
            relu = i + 1 < n and layers[i + 1].kind is LayerKind.RELU
            if relu:
                src.append(i + 1)
            out_qp = calib.activation(src[-1])
            ops.append(QuantOp(QOp.NORM_ISLAND, cur_qp, out_qp, tuple(src), norm=layer.norm,
                               adaptive=i in plan.unfused, relu=relu))
            cur_qp = out_qp
            i = src[-1] + 1
            continue
        if k is LayerKind.RELU:
            ops.append(QuantOp(QOp.RELU, cur_qp, cur_qp, (i,)))
        elif k is LayerKind.GLOBAL_AVG_POOL:
            ops.append(QuantOp(QOp.POOL, cur_qp, cur_qp, (i,)))
        elif k is LayerKind.RESIDUAL_BEGIN:
            ops.append(QuantOp(QOp.RES_BEGIN, cur_qp, cur_qp, (i,)))
        elif k is LayerKind.RESIDUAL_END:
            out_qp = calib.activation(i)
            ops.append(QuantOp(QOp.RES_END, cur_qp, out_qp, (i,)))
            cur_qp = out_qp
        i += 1
    last = ops[-1]
    if last.kind in (QOp.CONV, QOp.LINEAR) and not last.relu:
        ops[-1] = replace(last, float_out=True)
    return QuantizedModel(tuple(ops), input_qp, model.input_shape, model.num_classes, plan, model.name)


def _requantize(acc, multiplier, out_qp, relu):
    lo = out_qp.zero_point if relu else U8[0]
    q = np.rint(acc.astype(np.float64) * multiplier) + out_qp.zero_point
    return np.clip(q, lo, U8[1]).astype(np.uint8)


def _check_acc(acc, op_index):
    if acc.size and (acc.min() < INT32[0] or acc.max() > INT32[1]):
        raise NumericError(f"int32 accumulator overflow in quantized op {op_index}", op_index)
    return acc


def quantized_forward(qmodel, x, mode=graph.SOURCE, trace=False, counter=None):
    """Integer inference; float islands adapt when ``mode`` is ``Adapt``.

    Returns ``(logits, trace)`` like ``graph.forward``; trace records carry the
    float-graph layer id of each adapted island.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim < 2 or x.shape[1:] != tuple(qmodel.input_shape):
        raise ShapeError(f"input shape {x.shape[1:]} does not match model input {tuple(qmodel.input_shape)}")
    if not np.isfinite(x).all():
        raise NumericError("input contains NaN or Inf")
    adapt_cfg = getattr(mode, "cfg", None)
    h = quantize_tensor(x, qmodel.input_qp).q
    if counter is not None:
        counter.float_mults += x.size
        counter.requant_events += 1
    records = []
    skips = []
    out = None
    for j, op in enumerate(qmodel.ops):
        numel = h.size
        if op.kind in (QOp.CONV, QOp.LINEAR):
            if op.kind == QOp.CONV:
                acc = _backend.kernels.conv2d_q(np.ascontiguousarray(h), op.in_qp.zero_point, op.wq, op.bias_q,
                                                op.stride, op.padding)
            else:
                acc = _backend.kernels.linear_q(np.ascontiguousarray(h), op.in_qp.zero_point, op.wq, op.bias_q)
            _check_acc(acc, j)
            if counter is not None:
                if op.kind == QOp.CONV:
                    n, c_out, oh, ow = acc.shape
                    counter.int_mults += conv_mults(n, c_out, oh, ow, *op.wq.shape[1:])
                else:
                    counter.int_mults += linear_mults(acc.shape[0], *op.wq.shape)
                counter.float_mults += acc.size
            if op.float_out:
                out = (acc.astype(np.float64) * (op.in_qp.scale * op.w_scale)).astype(np.float32)
                if counter is not None:
                    counter.dequant_events += 1
                break
            h = _requantize(acc, op.in_qp.scale * op.w_scale / op.out_qp.scale, op.out_qp, op.relu)
            if counter is not None:
                counter.requant_events += 1
        elif op.kind == QOp.NORM_ISLAND:
            xf = dequantize_tensor(QuantizedTensor(h, op.in_qp))
            layer_id = op.source_ids[0]
            record = None
            if op.adaptive and adapt_cfg is not None:
                y, record = adaptive_normalize(xf, op.norm, adapt_cfg, layer_id)
                records.append(record)
            else:
                p = op.norm
                y = normalize(xf, p.mu_s, p.sigma2_s, p.gamma, p.beta, p.eps)
            if not np.isfinite(y).all():
                raise NumericError(f"non-finite activation in float island for layer {layer_id}", layer_id)
            h = _requantize(y, 1.0 / op.out_qp.scale, op.out_qp, op.relu)
            if counter is not None:
                counter.dequant_events += 1
                counter.requant_events += 1
                m, t = frozen_norm_ops(numel, op.norm.channels)
                counter.float_mults += 2 * numel + m
                counter.transcendentals += t
                if record is not None:
                    m, t = adapt_extra_ops(numel, op.norm.channels, adapt_cfg.distance_mode)
                    counter.float_mults += m
                    counter.transcendentals += t
        elif op.kind == QOp.RELU:
            h = np.maximum(h, np.uint8(op.in_qp.zero_point))
        elif op.kind == QOp.POOL:
            # same scale and zero point: the mean of q values is already in range
            h = np.rint(h.astype(np.float64).mean(axis=(2, 3))).astype(np.uint8)
            if counter is not None:
                counter.float_mults += h.size
        elif op.kind == QOp.RES_BEGIN:
            skips.append((h, op.in_qp))
        elif op.kind == QOp.RES_END:
            s, s_qp = skips.pop()
            total = dequantize_tensor(QuantizedTensor(h, op.in_qp)) + dequantize_tensor(QuantizedTensor(s, s_qp))
            h = _requantize(total, 1.0 / op.out_qp.scale, op.out_qp, False)
            if counter is not None:
                counter.float_mults += 3 * numel
                counter.dequant_events += 2
                counter.requant_events += 1
    if out is None:
        out = dequantize_tensor(QuantizedTensor(h, qmodel.ops[-1].out_qp)).astype(np.float32)
        if counter is not None:
            counter.float_mults += h.size
            counter.dequant_events += 1
    return out, (graph.ForwardTrace(records, []) if trace else None)


def run(model, x, mode=graph.SOURCE, trace=False, counter=None):
    """Dispatch to the float or integer executor depending on the model type."""
    if isinstance(model, QuantizedModel):
        return quantized_forward(model, x, mode, trace, counter)
    return graph.forward(model, x, mode, trace, counter)


# -- quantized model file ----------------------------------------------------------


def _write_qp(w, qp):
    w.f64(qp.scale)
    w.i64(qp.zero_point)
    w.u8(int(qp.signed))


def _read_qp(r, what):
    start = r.pos
    scale, zp, signed = r.f64(what + " scale"), r.i64(what + " zero point"), r.u8(what + " signedness")
    try:
        return QuantParams(scale, zp, bool(signed))
    except ConfigError as exc:
        raise FormatError(f"{what}: {exc}", start) from None


def _encode_op(op):
    w = Writer()
    _write_qp(w, op.in_qp)
    _write_qp(w, op.out_qp)
    w.u32(len(op.source_ids))
    for s in op.source_ids:
        w.u64(s)
    if op.kind in (QOp.CONV, QOp.LINEAR):
        w.u32(op.stride)
        w.u32(op.padding)
        w.u8(int(op.relu))
        w.u8(int(op.float_out))
        w.f64(op.w_scale)
        w.array(op.wq)
        w.array(op.bias_q)
    elif op.kind == QOp.NORM_ISLAND:
        w.u8(int(op.adaptive))
        w.u8(int(op.relu))
        p = op.norm
        w.f64(p.eps)
        for v in (p.mu_s, p.sigma2_s, p.gamma, p.beta):
            w.array(v)
    return w.getvalue()


def _decode_op(tag, payload, base):
    r = Reader(payload)
    try:
        in_qp = _read_qp(r, "input qparams")
        out_qp = _read_qp(r, "output qparams")
        src = tuple(r.u64("source id") for _ in range(r.u32("source count")))
        kw = {}
        if tag in (QOp.CONV, QOp.LINEAR):
            kw["stride"], kw["padding"] = r.u32("stride"), r.u32("padding")
            kw["relu"], kw["float_out"] = bool(r.u8("relu flag")), bool(r.u8("float_out flag"))
            kw["w_scale"] = r.f64("weight scale")
            kw["wq"] = np.ascontiguousarray(r.array("int8 weights"), dtype=np.int8)
            kw["bias_q"] = np.ascontiguousarray(r.array("int32 bias"), dtype=np.int32)
        elif tag == QOp.NORM_ISLAND:
            kw["adaptive"], kw["relu"] = bool(r.u8("adaptive flag")), bool(r.u8("relu flag"))
            eps = r.f64("eps")
            kw["norm"] = NormParams(*[r.array(nm) for nm in ("mu_s", "sigma2_s", "gamma", "beta")], eps=eps)
        r.expect_end()
    except FormatError as exc:
        raise FormatError(f"quantized op payload: {exc}", base + (exc.offset or 0)) from None
    except (ShapeError, ConfigError, NumericError) as exc:
        raise FormatError(f"invalid quantized op payload: {exc}", base) from None
    return QuantOp(tag, in_qp, out_qp, src, **kw)


def encode_quantized_model(qmodel):
    w = Writer()
    graph.write_header(w, graph.QUANT_VERSION, qmodel.name, qmodel.input_shape, qmodel.num_classes)
    _write_qp(w, qmodel.input_qp)
    for ids in (qmodel.plan.unfused, qmodel.plan.fused):
        w.u64(len(ids))
        for i in ids:
            w.u64(i)
    w.u64(len(qmodel.ops))
    for op in qmodel.ops:
        payload = _encode_op(op)
        w.u8(op.kind)
        w.u64(len(payload))
        w.raw(payload)
    return w.getvalue()


def decode_quantized_model(data):
    r = Reader(data)
    version, name, input_shape, num_classes = graph.read_header(r)
    if version != graph.QUANT_VERSION:
        raise VersionError(f"model file version {version} is not the quantized version {graph.QUANT_VERSION}", 4)
    input_qp = _read_qp(r, "model input qparams")
    unfused = tuple(r.u64("unfused id") for _ in range(r.u64("unfused count")))
    fused = tuple(r.u64("fused id") for _ in range(r.u64("fused count")))
    ops = []
    for _ in range(r.u64("op count")):
        tag_pos = r.pos
        tag = r.u8("op kind tag")
        if tag not in QOp.NAMES:
            raise VersionError(f"unknown quantized op kind tag {tag}", tag_pos)
        size = r.u64("op payload length")
        base = r.pos
        ops.append(_decode_op(tag, r.raw(size, f"op {len(ops)} payload"), base))
    r.expect_end()
    if not ops:
        raise FormatError("quantized model has no ops")
    return QuantizedModel(tuple(ops), input_qp, input_shape, num_classes, FusionPlan(unfused, fused), name)


def describe_op(op):
    name = QOp.NAMES[op.kind]
    bits = [name, f"src={','.join(map(str, op.source_ids))}",
            f"in_scale={op.in_qp.scale!r}", f"in_zp={op.in_qp.zero_point}",
            f"out_scale={op.out_qp.scale!r}", f"out_zp={op.out_qp.zero_point}"]
    if op.kind in (QOp.CONV, QOp.LINEAR):
        bits += [f"weights={'x'.join(map(str, op.wq.shape))}", f"w_scale={op.w_scale!r}", f"relu={int(op.relu)}"]
    if op.kind == QOp.NORM_ISLAND:
        bits += [f"adaptive={int(op.adaptive)}", f"relu={int(op.relu)}"]
    return " ".join(bits)


def save_quantized_model(qmodel, path, manifest=True):
    data = encode_quantized_model(qmodel)
    graph.atomic_write(path, data)
    if manifest:
        lines = [describe_op(op) for op in qmodel.ops]
        graph.write_manifest(path, data, graph.QUANT_VERSION, qmodel.name, qmodel.input_shape,
                             qmodel.num_classes, lines)
        with open(graph.manifest_path(path), "a", encoding="utf-8") as fh:
            fh.write(f"plan.unfused={','.join(map(str, qmodel.plan.unfused))}\n")
            fh.write(f"plan.fused={','.join(map(str, qmodel.plan.fused))}\n")


def load_quantized_model(path):
    return decode_quantized_model(Path(path).read_bytes())


def load_any(path):
    """Load a float ``ModelGraph`` or a ``QuantizedModel`` by its version tag."""
    data = Path(path).read_bytes()
    r = Reader(data)
    version = graph.read_header(r)[0]
    if version == graph.FLOAT_VERSION:
        return graph.decode_model(data)
    if version == graph.QUANT_VERSION:
        return decode_quantized_model(data)
    raise VersionError(f"unsupported model file version {version}", 4)


def save_any(model, path, manifest=True):
    if isinstance(model, QuantizedModel):
        save_quantized_model(model, path, manifest)
    elif isinstance(model, ModelGraph):
        graph.save_model(model, path, manifest)
    else:
        raise TypeError(f"cannot save {type(model).__name__}")

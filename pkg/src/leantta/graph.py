"""Sequential-with-skips model graphs, the float executor, and the model file.

A ``ModelGraph`` is a flat, ordered tuple of ``LayerSpec``. Residual blocks are
marked with paired ``RESIDUAL_BEGIN`` / ``RESIDUAL_END`` layers: the activation
entering ``RESIDUAL_BEGIN`` is added to the one arriving at ``RESIDUAL_END``.
A layer's id is its position in the tuple.

Normalization layers are either ``BATCH_NORM`` (always frozen) or
``ADAPTIVE_NORM`` (adapted per forward call when the executor runs in
``Adapt`` mode). All adaptation state lives inside one ``forward`` call.
"""

import enum
import hashlib
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from leantta import profiling
from leantta.adapt import AdaptConfig, LayerRecord, NormParams, adaptive_normalize, frozen_normalize
from leantta.container import Reader, Writer
from leantta.errors import ConfigError, FormatError, NumericError, ShapeError, VersionError
from leantta.tensor import as_tensor, conv2d, conv_output_size, global_avg_pool, linear, relu, residual_add

log = logging.getLogger(__name__)

MAGIC = b"LTTA"
FLOAT_VERSION = 1
QUANT_VERSION = 2


class LayerKind(enum.IntEnum):
    CONV2D = 1
    LINEAR = 2
    BATCH_NORM = 3
    ADAPTIVE_NORM = 4
    RELU = 5
    GLOBAL_AVG_POOL = 6
    RESIDUAL_BEGIN = 7
    RESIDUAL_END = 8


NORM_KINDS = (LayerKind.BATCH_NORM, LayerKind.ADAPTIVE_NORM)


def _frozen(a):
    a = np.array(a, dtype=np.float32)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LayerSpec:
    kind: LayerKind
    weights: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0
    norm: Optional[NormParams] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if self.kind in (LayerKind.CONV2D, LayerKind.LINEAR):
            if self.weights is None or self.bias is None:
                raise ConfigError(f"{self.kind.name} layer needs weights and bias")
            object.__setattr__(self, "weights", _frozen(self.weights))
            object.__setattr__(self, "bias", _frozen(self.bias).reshape(-1))
            want = 4 if self.kind is LayerKind.CONV2D else 2
            if self.weights.ndim != want:
                raise ShapeError(f"{self.kind.name} weights must be rank {want}, got {self.weights.shape}")
            if self.bias.size != self.weights.shape[0]:
                raise ShapeError(f"{self.kind.name} bias length {self.bias.size} != {self.weights.shape[0]}")
        if self.kind in NORM_KINDS and not isinstance(self.norm, NormParams):
            raise ConfigError(f"{self.kind.name} layer needs NormParams")

    @classmethod
    def conv(cls, weights, bias, stride=1, padding=0):
        return cls(LayerKind.CONV2D, weights=weights, bias=bias, stride=stride, padding=padding)

    @classmethod
    def fc(cls, weights, bias):
        return cls(LayerKind.LINEAR, weights=weights, bias=bias)

    @classmethod
    def batch_norm(cls, norm):
        return cls(LayerKind.BATCH_NORM, norm=norm)

    @classmethod
    def marker(cls, kind):
        return cls(kind)

    @property
    def is_norm(self):
        return self.kind in NORM_KINDS


def _infer_shapes(layers, input_shape):
    """Per-sample output shape of every layer; raises on any incompatibility."""
    shape = tuple(input_shape)
    stack = []
    shapes = []
    for i, layer in enumerate(layers):
        k = layer.kind
        if k is LayerKind.CONV2D:
            if len(shape) != 3 or shape[0] != layer.weights.shape[1]:
                raise ShapeError(f"layer {i} (CONV2D): input {shape} incompatible with weights {layer.weights.shape}")
            try:
                oh = conv_output_size(shape[1], layer.weights.shape[2], layer.stride, layer.padding)
                ow = conv_output_size(shape[2], layer.weights.shape[3], layer.stride, layer.padding)
            except ConfigError as exc:
                raise ConfigError(f"layer {i} (CONV2D): {exc}") from None
            shape = (layer.weights.shape[0], oh, ow)
        elif k is LayerKind.LINEAR:
            if len(shape) != 1 or shape[0] != layer.weights.shape[1]:
                raise ShapeError(f"layer {i} (LINEAR): input {shape} incompatible with weights {layer.weights.shape}")
            shape = (layer.weights.shape[0],)
        elif k in NORM_KINDS:
            if len(shape) not in (1, 3) or shape[0] != layer.norm.channels:
                raise ShapeError(f"layer {i} ({k.name}): input {shape} vs {layer.norm.channels} channels")
        elif k is LayerKind.GLOBAL_AVG_POOL:
            if len(shape) != 3:
                raise ShapeError(f"layer {i} (GLOBAL_AVG_POOL): needs (C, H, W) input, got {shape}")
            shape = (shape[0],)
        elif k is LayerKind.RESIDUAL_BEGIN:
            stack.append((i, shape))
        elif k is LayerKind.RESIDUAL_END:
            if not stack:
                raise ConfigError(f"layer {i}: RESIDUAL_END without matching RESIDUAL_BEGIN")
            j, skip_shape = stack.pop()
            if skip_shape != shape:
                raise ShapeError(f"layer {i}: residual from layer {j} has shape {skip_shape}, branch gives {shape}")
        shapes.append(shape)
    if stack:
        raise ConfigError(f"RESIDUAL_BEGIN at layer {stack[-1][0]} is never closed")
    return shapes


@dataclass(frozen=True, eq=False)
class ModelGraph:
    layers: tuple
    input_shape: tuple
    num_classes: int
    name: str = "model"
    shapes: tuple = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if not self.layers:
            raise ConfigError("model has no layers")
        shapes = _infer_shapes(self.layers, self.input_shape)
        if shapes[-1] != (self.num_classes,):
            raise ShapeError(f"model output shape {shapes[-1]} != ({self.num_classes},)")
        object.__setattr__(self, "shapes", tuple(shapes))

    def norm_layer_ids(self):
        return [i for i, layer in enumerate(self.layers) if layer.is_norm]

    def adaptive_layer_ids(self):
        return [i for i, layer in enumerate(self.layers) if layer.kind is LayerKind.ADAPTIVE_NORM]

    def with_layers(self, layers):
        return ModelGraph(tuple(layers), self.input_shape, self.num_classes, self.name)


# -- execution modes ---------------------------------------------------------


class Source:
    """Frozen inference with the recorded source statistics."""

    name = "source"
    distance_mode = "raw"

    def normalize(self, layer_id, layer, x):
        return frozen_normalize(x, layer.norm), None

    def __repr__(self):
        return "Source()"


SOURCE = Source()


@dataclass(frozen=True)
class Adapt:
    """Per-sample adaptation on ``ADAPTIVE_NORM`` layers; ``BATCH_NORM`` stays frozen."""

    cfg: AdaptConfig = AdaptConfig()
    name = "adapt"

    @property
    def distance_mode(self):
        return self.cfg.distance_mode

    def normalize(self, layer_id, layer, x):
        if layer.kind is LayerKind.ADAPTIVE_NORM:
            return adaptive_normalize(x, layer.norm, self.cfg, layer_id)
        return frozen_normalize(x, layer.norm), None


@dataclass
class ForwardTrace:
    records: list
    activations: list

    def d_values(self):
        return {r.layer_id: r.d for r in self.records}


def _count_layer(counter, layer, x_shape, y_shape, record, mode):
    k = layer.kind
    if k is LayerKind.CONV2D:
        n, c_out, oh, ow = y_shape
        _, c_in, kh, kw = layer.weights.shape
        counter.float_mults += profiling.conv_mults(n, c_out, oh, ow, c_in, kh, kw)
    elif k is LayerKind.LINEAR:
        counter.float_mults += profiling.linear_mults(x_shape[0], layer.weights.shape[0], layer.weights.shape[1])
    elif k in NORM_KINDS:
        numel = int(np.prod(x_shape))
        m, t = profiling.frozen_norm_ops(numel, layer.norm.channels)
        counter.float_mults += m
        counter.transcendentals += t
        if record is not None:
            m, t = profiling.adapt_extra_ops(numel, layer.norm.channels, mode.distance_mode)
            counter.float_mults += m
            counter.transcendentals += t
    elif k is LayerKind.GLOBAL_AVG_POOL:
        counter.float_mults += x_shape[0] * x_shape[1]


def forward(model, x, mode=SOURCE, trace=False, counter=None):
    """Run ``model`` on a batch ``x`` of shape ``(N, *model.input_shape)``.

    Returns ``(logits, trace)``; ``trace`` is ``None`` unless requested and then
    holds one ``LayerRecord`` per adapted layer plus every layer's output.
    """
    h = as_tensor(x, "input")
    if h.shape[1:] != model.input_shape:
        raise ShapeError(f"input shape {h.shape[1:]} does not match model input {model.input_shape}")
    records = []
    activations = []
    skips = []
    for i, layer in enumerate(model.layers):
        k = layer.kind
        record = None
        x_shape = h.shape
        if k is LayerKind.CONV2D:
            h = conv2d(h, layer.weights, layer.bias, layer.stride, layer.padding)
        elif k is LayerKind.LINEAR:
            h = linear(h, layer.weights, layer.bias)
        elif k in NORM_KINDS:
            h, record = mode.normalize(i, layer, h)
            if record is not None:
                records.append(record)
        elif k is LayerKind.RELU:
            h = relu(h)
        elif k is LayerKind.GLOBAL_AVG_POOL:
            h = global_avg_pool(h)
        elif k is LayerKind.RESIDUAL_BEGIN:
            skips.append(h)
        elif k is LayerKind.RESIDUAL_END:
            h = residual_add(h, skips.pop())
        if not np.isfinite(h).all():
            raise NumericError(f"non-finite activation after layer {i} ({k.name})", i)
        if counter is not None:
            _count_layer(counter, layer, x_shape, h.shape, record, mode)
        if trace:
            activations.append(h)
    return h, (ForwardTrace(records, activations) if trace else None)


def predict(model, x, mode=SOURCE):
    logits, _ = forward(model, x, mode)
    return np.argmax(logits, axis=1)


# -- graph rewrites ------------------------------------------------------------


def replace_norm_layers(model, layer_ids=None):
    """Turn normalization layers into ``ADAPTIVE_NORM`` with identical parameters.

    With ``layer_ids=None`` every ``BATCH_NORM`` is replaced and a model without
    any is an error. Otherwise exactly the listed norm layers become adaptive
    and every other norm layer becomes a frozen ``BATCH_NORM``.
    """
    norm_ids = model.norm_layer_ids()
    if layer_ids is None:
        targets = {i for i in norm_ids if model.layers[i].kind is LayerKind.BATCH_NORM}
        if not targets:
            raise ConfigError("model has no BATCH_NORM layers to replace")
        targets |= set(model.adaptive_layer_ids())
    else:
        targets = {int(i) for i in layer_ids}
        unknown = targets - set(norm_ids)
        if unknown:
            raise ConfigError(f"layer ids {sorted(unknown)} are not normalization layers")
    layers = []
    for i, layer in enumerate(model.layers):
        if layer.is_norm:
            kind = LayerKind.ADAPTIVE_NORM if i in targets else LayerKind.BATCH_NORM
            layer = replace(layer, kind=kind)
        layers.append(layer)
    return model.with_layers(layers)


def freeze_norm_layers(model):
    return replace_norm_layers(model, [])


# -- model file ------------------------------------------------------------------


def write_header(w, version, name, input_shape, num_classes):
    w.raw(MAGIC)
    w.u32(version)
    w.string(name)
    w.shape(input_shape)
    w.u32(num_classes)


def read_header(r):
    magic = r.raw(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version = r.u32("format version")
    name = r.string("model name")
    input_shape = r.shape("input shape")
    num_classes = r.u32("class count")
    return version, name, input_shape, num_classes


def _encode_layer(layer):
    w = Writer()
    k = layer.kind
    if k is LayerKind.CONV2D:
        w.u32(layer.stride)
        w.u32(layer.padding)
        w.array(layer.weights)
        w.array(layer.bias)
    elif k is LayerKind.LINEAR:
        w.array(layer.weights)
        w.array(layer.bias)
    elif k in NORM_KINDS:
        p = layer.norm
        w.f64(p.eps)
        for v in (p.mu_s, p.sigma2_s, p.gamma, p.beta):
            w.array(v)
    return w.getvalue()


def _decode_layer(tag, payload, base):
    r = Reader(payload)
    try:
        if tag == LayerKind.CONV2D:
            stride, padding = r.u32("stride"), r.u32("padding")
            layer = LayerSpec.conv(r.array("conv weights"), r.array("conv bias"), stride, padding)
        elif tag == LayerKind.LINEAR:
            layer = LayerSpec.fc(r.array("linear weights"), r.array("linear bias"))
        elif tag in (LayerKind.BATCH_NORM, LayerKind.ADAPTIVE_NORM):
            eps = r.f64("eps")
            vecs = [r.array(n) for n in ("mu_s", "sigma2_s", "gamma", "beta")]
            layer = LayerSpec(LayerKind(tag), norm=NormParams(*vecs, eps=eps))
        else:
            layer = LayerSpec.marker(LayerKind(tag))
        r.expect_end()
    except FormatError as exc:
        raise FormatError(f"layer payload: {exc}", base + (exc.offset or 0)) from None
    except (ShapeError, ConfigError, NumericError) as exc:
        raise FormatError(f"invalid layer payload: {exc}", base) from None
    return layer


def encode_model(model):
    w = Writer()
    write_header(w, FLOAT_VERSION, model.name, model.input_shape, model.num_classes)
    w.u64(len(model.layers))
    for layer in model.layers:
        payload = _encode_layer(layer)
        w.u8(int(layer.kind))
        w.u64(len(payload))
        w.raw(payload)
    return w.getvalue()


def decode_model(data):
    r = Reader(data)
    version, name, input_shape, num_classes = read_header(r)
    if version != FLOAT_VERSION:
        raise VersionError(f"model file version {version} is not the float graph version {FLOAT_VERSION}", 4)
    count = r.u64("layer count")
    layers = []
    for _ in range(count):
        tag_pos = r.pos
        tag = r.u8("layer kind tag")
        if tag not in LayerKind._value2member_map_:
            raise VersionError(f"unknown layer kind tag {tag}", tag_pos)
        size = r.u64("layer payload length")
        base = r.pos
        payload = r.raw(size, f"layer {len(layers)} payload")
        layers.append(_decode_layer(tag, payload, base))
    r.expect_end()
    try:
        return ModelGraph(tuple(layers), input_shape, num_classes, name)
    except (ShapeError, ConfigError) as exc:
        raise FormatError(f"model file describes an invalid graph: {exc}") from None


def atomic_write(path, data):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def manifest_path(path):
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def describe_layer(layer):
    k = layer.kind
    if k is LayerKind.CONV2D:
        return f"{k.name} weights={'x'.join(map(str, layer.weights.shape))} stride={layer.stride} padding={layer.padding}"
    if k is LayerKind.LINEAR:
        return f"{k.name} weights={'x'.join(map(str, layer.weights.shape))}"
    if k in NORM_KINDS:
        return f"{k.name} channels={layer.norm.channels} eps={layer.norm.eps!r}"
    return k.name


def write_manifest(path, data, version, name, input_shape, num_classes, layer_lines):
    lines = [
        "format=LTTA",
        f"version={version}",
        f"name={name}",
        f"input_shape={','.join(map(str, input_shape))}",
        f"num_classes={num_classes}",
        f"layers={len(layer_lines)}",
    ]
    lines += [f"layer.{i}={desc}" for i, desc in enumerate(layer_lines)]
    lines.append(f"sha256={hashlib.sha256(data).hexdigest()}")
    manifest_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_model(model, path, manifest=True):
    data = encode_model(model)
    atomic_write(path, data)
    if manifest:
        write_manifest(path, data, FLOAT_VERSION, model.name, model.input_shape, model.num_classes,
                       [describe_layer(layer) for layer in model.layers])
    log.debug("saved %s (%d bytes) to %s", model.name, len(data), path)


def load_model(path):
    return decode_model(Path(path).read_bytes())

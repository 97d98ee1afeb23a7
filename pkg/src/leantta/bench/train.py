"""Mini-batch SGD trainer for the two reference architectures.

``mlp-bn``:   Linear -> BN -> ReLU -> Linear -> BN -> ReLU -> Linear
``tiny-cnn``: Conv3x3 -> BN -> ReLU -> Conv3x3 -> BN -> ReLU -> GlobalAvgPool -> Linear

Gradients are derived by hand per layer and everything runs in float64; the
exported ``ModelGraph`` holds float32 parameters and the batch-norm running
statistics of the final step as its source statistics.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from leantta import graph
from leantta.adapt import NormParams
from leantta.errors import ConfigError, TrainingError
from leantta.graph import LayerKind, LayerSpec, ModelGraph

log = logging.getLogger(__name__)

ARCHS = ("mlp-bn", "tiny-cnn")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 0.05
    batch_size: int = 32
    bn_momentum: float = 0.9
    seed: int = 0
    sgd_momentum: float = 0.9
    hidden: int = 32
    channels: tuple = (8, 16)
    bn_eps: float = 1e-5

    def __post_init__(self):
        if not 0.0 <= self.bn_momentum <= 1.0:
            raise ConfigError(f"bn_momentum must lie in [0, 1], got {self.bn_momentum}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.epochs < 0 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 0 and batch_size >= 2")


class _Dense:
    def __init__(self, f_in, f_out, rng, zero=False):
        std = 0.0 if zero else np.sqrt(2.0 / f_in)
        self.params = {"w": rng.normal(0.0, 1.0, (f_out, f_in)) * std, "b": np.zeros(f_out)}

    def forward(self, x, train):
        self.x = x
        return x @ self.params["w"].T + self.params["b"]

    def backward(self, g):
        self.grads = {"w": g.T @ self.x, "b": g.sum(axis=0)}
        return g @ self.params["w"]

    def export(self):
        return [LayerSpec.fc(self.params["w"], self.params["b"])]


class _Conv:
    def __init__(self, c_in, c_out, k, rng, padding=1):
        std = np.sqrt(2.0 / (c_in * k * k))
        self.params = {"w": rng.normal(0.0, std, (c_out, c_in, k, k)), "b": np.zeros(c_out)}
        self.k = k
        self.padding = padding

    def forward(self, x, train):
        p, k = self.padding, self.k
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N, C, H', W', k, k
        n, c, oh, ow = win.shape[:4]
        self.cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
        self.in_shape = x.shape
        self.out_hw = (oh, ow)
        w = self.params["w"].reshape(len(self.params["b"]), -1)
        out = self.cols @ w.T + self.params["b"]
        return out.reshape(n, oh, ow, -1).transpose(0, 3, 1, 2)

    def backward(self, g):
        n, c, h, wd = self.in_shape
        oh, ow = self.out_hw
        k, p = self.k, self.padding
        c_out = len(self.params["b"])
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        self.grads = {"w": (g2.T @ self.cols).reshape(self.params["w"].shape), "b": g2.sum(axis=0)}
        dcols = (g2 @ self.params["w"].reshape(c_out, -1)).reshape(n, oh, ow, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + oh, j:j + ow] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + h, p:p + wd]

    def export(self):
        return [LayerSpec.conv(self.params["w"], self.params["b"], 1, self.padding)]


class _BatchNorm:
    def __init__(self, channels, momentum, eps):
        self.params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def _shape(self, ndim):
        return (1, -1, 1, 1) if ndim == 4 else (1, -1)

    def forward(self, x, train):
        axes = (0, 2, 3) if x.ndim == 4 else (0,)
        shp = self._shape(x.ndim)
        if train:
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = x.size // x.shape[1]
            # running variance tracks the unbiased estimate
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mu
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var * m / max(m - 1, 1)
        else:
            mu, var = self.running_mean, self.running_var
        self.inv_std = 1.0 / np.sqrt(var + self.eps)
        self.xhat = (x - mu.reshape(shp)) * self.inv_std.reshape(shp)
        self.axes = axes
        return self.params["gamma"].reshape(shp) * self.xhat + self.params["beta"].reshape(shp)

    def backward(self, g):
        shp = self._shape(g.ndim)
        axes = self.axes
        m = g.size // g.shape[1]
        self.grads = {"gamma": (g * self.xhat).sum(axis=axes), "beta": g.sum(axis=axes)}
        dxhat = g * self.params["gamma"].reshape(shp)
        s1 = dxhat.sum(axis=axes).reshape(shp)
        s2 = (dxhat * self.xhat).sum(axis=axes).reshape(shp)
        return self.inv_std.reshape(shp) / m * (m * dxhat - s1 - self.xhat * s2)

    def export(self):
        norm = NormParams(self.running_mean, np.maximum(self.running_var, 0.0),
                          self.params["gamma"], self.params["beta"], eps=self.eps)
        return [LayerSpec.batch_norm(norm)]


class _Relu:
    params = {}

    def forward(self, x, train):
        self.mask = x > 0
        return x * self.mask

    def backward(self, g):
        self.grads = {}
        return g * self.mask

    def export(self):
        return [LayerSpec.marker(LayerKind.RELU)]


class _Pool:
    params = {}

    def forward(self, x, train):
        self.shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, g):
        self.grads = {}
        n, c, h, w = self.shape
        return np.broadcast_to(g[:, :, None, None] / (h * w), self.shape)

    def export(self):
        return [LayerSpec.marker(LayerKind.GLOBAL_AVG_POOL)]


def _build(arch, sample_shape, num_classes, cfg, rng):
    if arch == "mlp-bn":
        if len(sample_shape) != 1:
            raise ConfigError(f"mlp-bn needs feature-vector samples, got shape {sample_shape}")
        f, h = sample_shape[0], cfg.hidden
        return [_Dense(f, h, rng), _BatchNorm(h, cfg.bn_momentum, cfg.bn_eps), _Relu(),
                _Dense(h, h, rng), _BatchNorm(h, cfg.bn_momentum, cfg.bn_eps), _Relu(),
                _Dense(h, num_classes, rng, zero=True)]
    if arch == "tiny-cnn":
        if len(sample_shape) != 3:
            raise ConfigError(f"tiny-cnn needs (C, H, W) samples, got shape {sample_shape}")
        c1, c2 = cfg.channels
        return [_Conv(sample_shape[0], c1, 3, rng), _BatchNorm(c1, cfg.bn_momentum, cfg.bn_eps), _Relu(),
                _Conv(c1, c2, 3, rng), _BatchNorm(c2, cfg.bn_momentum, cfg.bn_eps), _Relu(),
                _Pool(), _Dense(c2, num_classes, rng, zero=True)]
    raise ConfigError(f"unknown architecture {arch!r}; expected one of {ARCHS}")


def _softmax_xent(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = -np.log(p[np.arange(n), labels] + 1e-300).mean()
    p[np.arange(n), labels] -= 1.0
    return loss, p / n


def _params_fit_float32(layers):
    limit = float(np.finfo(np.float32).max)
    for layer in layers:
        for v in layer.params.values():
            if not (np.isfinite(v).all() and np.abs(v).max(initial=0.0) < limit):
                return False
        stats = getattr(layer, "running_var", None)
        if stats is not None and not (np.isfinite(stats).all() and stats.max() < limit
                                      and np.abs(layer.running_mean).max() < limit):
            return False
    return True


@dataclass
class TrainResult:
    model: ModelGraph
    holdout_accuracy: float = float("nan")
    losses: list = field(default_factory=list)


def accuracy_of(model, ds, mode=graph.SOURCE):
    if len(ds) == 0:
        return float("nan")
    preds = graph.predict(model, ds.inputs, mode)
    return float(np.mean(preds == ds.labels))


def train_reference_model(arch, data, cfg=TrainConfig(), holdout=None, name=None):
    """Train ``arch`` on ``data``; report clean accuracy on ``holdout`` if given."""
    rng = np.random.default_rng(cfg.seed)
    layers = _build(arch, data.sample_shape, data.num_classes, cfg, rng)
    velocity = [{k: np.zeros_like(v) for k, v in layer.params.items()} for layer in layers]
    x_all = data.inputs.astype(np.float64)
    y_all = data.labels
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        total, seen = 0.0, 0
        for start in range(0, len(order) - 1, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            h = x_all[idx]
            for layer in layers:
                h = layer.forward(h, True)
            loss, g = _softmax_xent(h, y_all[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"loss became non-finite in epoch {epoch}", epoch)
            for layer in reversed(layers):
                g = layer.backward(g)
            for layer, vel in zip(layers, velocity):
                for k, p in layer.params.items():
                    vel[k] = cfg.sgd_momentum * vel[k] - cfg.lr * layer.grads[k]
                    p += vel[k]
            total += loss * len(idx)
            seen += len(idx)
        losses.append(total / max(seen, 1))
        log.debug("epoch %d loss %.5f", epoch, losses[-1])
        if not _params_fit_float32(layers):
            raise TrainingError(f"parameters diverged beyond float32 range in epoch {epoch}", epoch)
    specs = [spec for layer in layers for spec in layer.export()]
    model = ModelGraph(tuple(specs), data.sample_shape, data.num_classes, name or arch)
    result = TrainResult(model, losses=losses)
    if holdout is not None:
        result.holdout_accuracy = accuracy_of(model, holdout)
        log.info("%s holdout accuracy %.4f", arch, result.holdout_accuracy)
    return result

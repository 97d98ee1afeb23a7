"""Backpropagation-free, per-sample normalization statistics adaptation.

Pipeline for one normalization layer and one incoming activation:

1. ``instance_stats``  - per-channel mean and population variance of the input
2. ``stabilize``       - convex blend with the source statistics, weight ``tau``
3. ``divergence``      - ``d = 1 - exp(-m2)`` where ``m2`` is the squared
                         Mahalanobis distance of the stabilized mean from the
                         source mean under the diagonal source covariance
4. ``blend``           - convex blend of source and stabilized statistics with
                         weight ``d * lam`` on the source side
5. ``normalize``       - affine normalization with the blended statistics

Nothing here mutates ``NormParams``; the source statistics are the reset state,
so every call starts from them.

Statistics are computed in float64. Variance is the biased (population)
estimator, matching the inference-time batch-norm convention; the unbiased
estimator differs by a factor ``n / (n - 1)``.
"""

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from leantta.errors import ConfigError, NumericError, ShapeError

DISTANCE_MODES = ("raw", "channel-mean")

M2_CLAMP = 700.0
# largest double below 1; keeps d inside [0, 1) once exp(-m2) stops resolving
D_MAX = float(np.nextafter(1.0, 0.0))


@dataclass(frozen=True, eq=False)
class NormParams:
    """Frozen per-channel source statistics and affine parameters of one norm layer."""

    mu_s: np.ndarray
    sigma2_s: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        vecs = {}
        for name in ("mu_s", "sigma2_s", "gamma", "beta"):
            v = np.array(getattr(self, name), dtype=np.float32).reshape(-1)
            v.setflags(write=False)
            vecs[name] = v
            object.__setattr__(self, name, v)
        sizes = {v.size for v in vecs.values()}
        if len(sizes) != 1 or 0 in sizes:
            raise ShapeError(f"NormParams vectors must share one nonzero length, got {sorted(sizes)}")
        if not all(np.isfinite(v).all() for v in vecs.values()):
            raise NumericError("NormParams contains NaN or Inf")
        if (vecs["sigma2_s"] < 0).any():
            raise ConfigError("sigma2_s must be >= 0")
        if not self.eps > 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        object.__setattr__(self, "eps", float(self.eps))

    @property
    def channels(self):
        return self.mu_s.size

    def source_stats(self):
        return ChannelStats(self.mu_s.astype(np.float64), self.sigma2_s.astype(np.float64))

    def digest(self):
        h = hashlib.sha256()
        for v in (self.mu_s, self.sigma2_s, self.gamma, self.beta):
            h.update(v.tobytes())
        h.update(np.float64(self.eps).tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, NormParams):
            return NotImplemented
        return self.digest() == other.digest()

    __hash__ = None


@dataclass(frozen=True)
class AdaptConfig:
    """Hyperparameters of the adaptation pipeline.

    ``eps_norm=None`` reuses each layer's own ``eps`` in the final
    normalization, so ``tau=1`` reproduces frozen inference bit for bit.
    """

    tau: float = 0.9
    lam: float = 0.9
    eps_norm: Optional[float] = None
    eps_inv: float = 1e-5
    distance_mode: str = "raw"

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.eps_norm is not None and not self.eps_norm > 0:
            raise ConfigError(f"eps_norm must be > 0, got {self.eps_norm}")
        if not self.eps_inv > 0:
            raise ConfigError(f"eps_inv must be > 0, got {self.eps_inv}")
        if self.distance_mode not in DISTANCE_MODES:
            raise ConfigError(f"distance_mode must be one of {DISTANCE_MODES}, got {self.distance_mode!r}")


@dataclass(frozen=True, eq=False)
class ChannelStats:
    mu: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        sigma2 = np.asarray(self.sigma2, dtype=np.float64).reshape(-1)
        if mu.shape != sigma2.shape:
            raise ShapeError(f"ChannelStats: mu has {mu.size} channels, sigma2 has {sigma2.size}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma2", sigma2)

    @property
    def channels(self):
        return self.mu.size


@dataclass
class LayerRecord:
    """Per-layer adaptation trace entry."""

    layer_id: int
    d: float
    m2: float
    target: ChannelStats
    stabilized: ChannelStats
    blended: ChannelStats
    pooled_batch: bool = False
    extra: dict = field(default_factory=dict)


def _channel_axes(ndim):
    if ndim == 4:
        return (0, 2, 3)
    if ndim == 2:
        return (0,)
    raise ShapeError(f"normalization expects a rank-2 or rank-4 activation, got rank {ndim}")


def _broadcast(v, ndim):
    return v.reshape((1, -1, 1, 1) if ndim == 4 else (1, -1))


def instance_stats(activation):
    """Per-channel mean and population variance over every non-channel axis."""
    x = np.asarray(activation, dtype=np.float64)
    axes = _channel_axes(x.ndim)
    mu = x.mean(axis=axes)
    centered = x - _broadcast(mu, x.ndim)
    sigma2 = np.maximum((centered * centered).mean(axis=axes), 0.0)
    return ChannelStats(mu, sigma2)


def _check_channels(a, b):
    if a.channels != b.channels:
        raise ShapeError(f"channel mismatch: {a.channels} vs {b.channels}")


def stabilize(source, target, tau):
    _check_channels(source, target)
    return ChannelStats(
        tau * source.mu + (1.0 - tau) * target.mu,
        tau * source.sigma2 + (1.0 - tau) * target.sigma2,
    )


def squared_distance(stabilized_mu, params, mode="raw", eps_inv=1e-5):
    mu_b = np.asarray(stabilized_mu, dtype=np.float64).reshape(-1)
    if mu_b.size != params.channels:
        raise ShapeError(f"divergence: {mu_b.size} means for {params.channels} channels")
    diff = mu_b - params.mu_s.astype(np.float64)
    m2 = float(np.sum(diff * diff / (params.sigma2_s.astype(np.float64) + eps_inv)))
    if mode == "channel-mean":
        m2 /= params.channels
    elif mode != "raw":
        raise ConfigError(f"unknown distance mode {mode!r}")
    return m2


def divergence_from_m2(m2):
    m2 = min(max(m2, 0.0), M2_CLAMP)
    return min(-math.expm1(-m2), D_MAX)


def divergence(stabilized_mu, params, mode="raw", eps_inv=1e-5):
    """Shift severity ``d`` in [0, 1) of the stabilized mean relative to the source."""
    return divergence_from_m2(squared_distance(stabilized_mu, params, mode, eps_inv))


def blend(source, stabilized, d, lam):
    _check_channels(source, stabilized)
    w = d * lam
    if not 0.0 <= w <= 1.0:
        raise ConfigError(f"d * lambda must lie in [0, 1], got {w}")
    return ChannelStats(
        w * source.mu + (1.0 - w) * stabilized.mu,
        w * source.sigma2 + (1.0 - w) * stabilized.sigma2,
    )


def normalize(x, mu, sigma2, gamma, beta, eps):
    """``gamma * (x - mu) / sqrt(sigma2 + eps) + beta`` per channel, float32 out."""
    x = np.asarray(x, dtype=np.float64)
    nd = x.ndim
    _channel_axes(nd)
    scale = np.asarray(gamma, dtype=np.float64) / np.sqrt(np.asarray(sigma2, dtype=np.float64) + eps)
    y = (x - _broadcast(np.asarray(mu, dtype=np.float64), nd)) * _broadcast(scale, nd)
    y += _broadcast(np.asarray(beta, dtype=np.float64), nd)
    with np.errstate(over="ignore"):  # overflow becomes inf, rejected by callers
        return y.astype(np.float32)


def frozen_normalize(x, params):
    _check_input(x, params)
    return normalize(x, params.mu_s, params.sigma2_s, params.gamma, params.beta, params.eps)


def _check_input(x, params):
    if np.ndim(x) not in (2, 4):
        raise ShapeError(f"normalization expects a rank-2 or rank-4 activation, got shape {np.shape(x)}")
    if np.shape(x)[1] != params.channels:
        raise ShapeError(f"activation has {np.shape(x)[1]} channels, layer has {params.channels}")


def adaptive_normalize(x, params, cfg, layer_id=-1):
    """Run the full adaptation pipeline on ``x`` and return ``(output, LayerRecord)``."""
    _check_input(x, params)
    source = params.source_stats()
    target = instance_stats(x)
    stabilized = stabilize(source, target, cfg.tau)
    m2 = squared_distance(stabilized.mu, params, cfg.distance_mode, cfg.eps_inv)
    d = divergence_from_m2(m2)
    blended = blend(source, stabilized, d, cfg.lam)
    eps = params.eps if cfg.eps_norm is None else cfg.eps_norm
    y = normalize(x, blended.mu, blended.sigma2, params.gamma, params.beta, eps)
    if not np.isfinite(y).all():
        raise NumericError(f"non-finite output in adaptive normalization at layer {layer_id}", layer_id)
    record = LayerRecord(layer_id, d, m2, target, stabilized, blended, pooled_batch=np.shape(x)[0] > 1)
    return y, record

"""Deterministic operation counters filled in by the model executors.

Counts are analytic per layer invocation (a multiply-accumulate counts as
one multiply; divisions count as multiplies; square roots and exponentials
are tallied separately). They stand in for wall-clock timing in tests.
"""

from dataclasses import asdict, dataclass


@dataclass
class OpCounts:
    float_mults: int = 0
    int_mults: int = 0
    transcendentals: int = 0
    dequant_events: int = 0
    requant_events: int = 0

    def __add__(self, other):
        return OpCounts(**{k: v + getattr(other, k) for k, v in asdict(self).items()})

    def __sub__(self, other):
        return OpCounts(**{k: v - getattr(other, k) for k, v in asdict(self).items()})

    def as_dict(self):
        return asdict(self)


def conv_mults(n, c_out, oh, ow, c_in, kh, kw):
    return n * c_out * oh * ow * c_in * kh * kw


def linear_mults(n, f_out, f_in):
    return n * f_out * f_in


def frozen_norm_ops(numel, channels):
    """Per-channel ``gamma / sqrt(var + eps)`` then one multiply per element."""
    return numel + channels, channels


def adapt_extra_ops(numel, channels, distance_mode="raw"):
    """Float multiplies and transcendentals added on top of a frozen norm.

    instance stats: ``numel`` squares + ``2C`` divisions by the count;
    stabilize: ``4C``; squared distance: ``2C`` (+1 for the channel mean);
    blend: ``4C`` + 1 for ``d * lam``; plus one exponential.
    """
    mults = numel + 12 * channels + 1 + (1 if distance_mode == "channel-mean" else 0)
    return mults, 1

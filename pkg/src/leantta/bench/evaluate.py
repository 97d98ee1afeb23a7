"""Batch-1 stream evaluation under frozen, adaptive and baseline normalization."""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from leantta import graph, quant
from leantta.adapt import AdaptConfig, ChannelStats, LayerRecord, frozen_normalize, instance_stats, normalize
from leantta.bench import metrics
from leantta.errors import ConfigError, LeanTTAError
from leantta.graph import LayerKind
from leantta.profiling import OpCounts

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class NaiveReplace(graph.Adapt):
    """Instance statistics substituted outright for the source statistics."""

    name = "naive"

    def __init__(self):
        super().__init__(AdaptConfig(tau=0.0, lam=0.0))

    def __repr__(self):
        return "NaiveReplace()"


class RunningAvg:
    """Stateful baseline: exponential moving average of instance statistics.

    ``stats <- momentum * stats + (1 - momentum) * instance`` starting from the
    source statistics, carried across every sample of a stream. Call
    ``fresh()`` for an independent copy with the state reset.
    """

    name = "running-avg"
    distance_mode = "raw"

    def __init__(self, momentum=0.9):
        if not 0.0 <= momentum <= 1.0:
            raise ConfigError(f"momentum must lie in [0, 1], got {momentum}")
        self.momentum = momentum
        self.state = {}

    def fresh(self):
        return RunningAvg(self.momentum)

    def normalize(self, layer_id, layer, x):
        if layer.kind is not LayerKind.ADAPTIVE_NORM:
            return frozen_normalize(x, layer.norm), None
        p = layer.norm
        prev = self.state.get(layer_id) or p.source_stats()
        inst = instance_stats(x)
        m = self.momentum
        cur = ChannelStats(m * prev.mu + (1 - m) * inst.mu, m * prev.sigma2 + (1 - m) * inst.sigma2)
        self.state[layer_id] = cur
        y = normalize(x, cur.mu, cur.sigma2, p.gamma, p.beta, p.eps)
        return y, LayerRecord(layer_id, float("nan"), float("nan"), inst, cur, cur)

    def __repr__(self):
        return f"RunningAvg(momentum={self.momentum})"


def parse_mode(name, tau=0.9, lam=0.9, distance_mode="raw", momentum=0.9):
    name = name.replace("_", "-")
    if name == "source":
        return graph.SOURCE
    if name == "adapt":
        return graph.Adapt(AdaptConfig(tau=tau, lam=lam, distance_mode=distance_mode))
    if name == "naive":
        return NaiveReplace()
    if name == "running-avg":
        return RunningAvg(momentum)
    raise ConfigError(f"unknown evaluation mode {name!r}")


def describe_mode(mode):
    out = {"mode": mode.name}
    cfg = getattr(mode, "cfg", None)
    if cfg is not None:
        out.update(tau=cfg.tau, lam=cfg.lam, distance_mode=cfg.distance_mode, eps_inv=cfg.eps_inv,
                   eps_norm=cfg.eps_norm)
    if isinstance(mode, RunningAvg):
        out["momentum"] = mode.momentum
    return out


@dataclass
class SampleRecord:
    sample_id: int
    label: int
    pred: int
    kind: str = "identity"
    severity: int = 0
    d: tuple = ()
    error: str = ""

    @property
    def correct(self):
        return self.pred == self.label


@dataclass
class RunReport:
    records: list
    metadata: dict = field(default_factory=dict)
    op_counts: dict = None
    wall_time: float = None

    @property
    def accuracy(self):
        return metrics.accuracy(self.records) if self.records else float("nan")

    @property
    def weighted_f1(self):
        return metrics.weighted_f1(self.records) if self.records else float("nan")

    def predictions(self):
        return {r.sample_id: r.pred for r in self.records}

    def aggregate(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "n": len(self.records),
            "correct": sum(r.correct for r in self.records),
            "errors": sum(1 for r in self.records if r.error),
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
        }


def ensure_adaptive(model):
    """Float models with no adaptive layer get every norm layer replaced."""
    if isinstance(model, graph.ModelGraph) and not model.adaptive_layer_ids():
        return graph.replace_norm_layers(model)
    return model


def evaluate_stream(model, stream, mode=graph.SOURCE, trace=False, count_ops=False):
    """Classify every stream item one at a time.

    Adaptive modes restart from the source statistics for every item; only
    ``RunningAvg`` carries state, and a fresh copy is used for each call.
    Engine errors on one item are recorded on that item and evaluation continues.
    """
    if isinstance(mode, RunningAvg):
        if isinstance(model, quant.QuantizedModel):
            raise ConfigError("running-average baseline is only defined for float models")
        mode = mode.fresh()
    counter = OpCounts() if count_ops else None
    records = []
    ids = stream.ids()
    t0 = time.perf_counter()
    for i in range(len(stream)):
        x = stream.inputs[i:i + 1]
        spec = stream.spec_at(i)
        rec = SampleRecord(int(ids[i]), int(stream.labels[i]), -1, spec.kind.value,
                           int(stream.severities[i]) if stream.annotated else 0)
        try:
            logits, tr = quant.run(model, x, mode, trace=trace, counter=counter)
            rec.pred = int(np.argmax(logits[0]))
            if tr is not None:
                rec.d = tuple(float(r.d) for r in tr.records)
        except LeanTTAError as exc:
            rec.error = f"{exc.category}: {exc}"
            log.warning("sample %d failed: %s", rec.sample_id, exc)
        records.append(rec)
    wall = time.perf_counter() - t0
    meta = describe_mode(mode)
    meta["model"] = model.name
    meta["quantized"] = isinstance(model, quant.QuantizedModel)
    if meta["quantized"]:
        meta["fusion_unfused"] = list(model.plan.unfused)
    return RunReport(records, meta, counter.as_dict() if counter else None, wall)

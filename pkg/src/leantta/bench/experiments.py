"""Hyperparameter sweeps, layer ablations and op-count profiling.

Grid cells are independent; with ``workers > 1`` they run on a thread pool
and results are merged by cell index, so output is identical for any worker
count.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from leantta import graph, quant
from leantta.adapt import AdaptConfig
from leantta.bench.evaluate import ensure_adaptive, evaluate_stream
from leantta.errors import ConfigError
from leantta.profiling import OpCounts

DEFAULT_GRID = tuple(round(0.1 * i, 1) for i in range(11))
DIRECTIONS = ("drop-shallow", "add-deep")


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _grid(values, name):
    vals = sorted({float(v) for v in values})
    if not vals:
        raise ConfigError(f"{name} grid is empty")
    if vals[0] < 0.0 or vals[-1] > 1.0:
        raise ConfigError(f"{name} grid values must lie in [0, 1]")
    return vals


@dataclass
class SweepResult:
    taus: list
    lams: list
    accuracy: np.ndarray  # [tau index, lambda index]

    def cell(self, tau, lam):
        return float(self.accuracy[self.taus.index(float(tau)), self.lams.index(float(lam))])

    def to_csv(self):
        lines = ["tau\\lambda," + ",".join(repr(v) for v in self.lams)]
        for i, t in enumerate(self.taus):
            lines.append(repr(t) + "," + ",".join(repr(float(a)) for a in self.accuracy[i]))
        return "\n".join(lines) + "\n"


def sweep_hyperparams(model, stream, tau_grid=DEFAULT_GRID, lambda_grid=DEFAULT_GRID,
                      distance_mode="raw", workers=1):
    """Adapt-mode accuracy on every (tau, lambda) cell; duplicates are merged."""
    taus, lams = _grid(tau_grid, "tau"), _grid(lambda_grid, "lambda")
    model = ensure_adaptive(model)
    cells = [(t, lam) for t in taus for lam in lams]

    def run(cell):
        mode = graph.Adapt(AdaptConfig(tau=cell[0], lam=cell[1], distance_mode=distance_mode))
        return evaluate_stream(model, stream, mode).accuracy

    acc = np.array(_map(run, cells, workers), dtype=np.float64).reshape(len(taus), len(lams))
    return SweepResult(taus, lams, acc)


@dataclass
class AblationResult:
    direction: str
    norm_layer_ids: list
    subsets: list
    accuracy: list

    def to_csv(self):
        lines = ["k,adaptive_layers,accuracy"]
        for k, (sub, a) in enumerate(zip(self.subsets, self.accuracy)):
            lines.append(f"{k},{';'.join(map(str, sub))},{a!r}")
        return "\n".join(lines) + "\n"


def ablation_subsets(norm_ids, direction):
    """Adaptive layer set for each k = 0..L.

    ``add-deep``: the shallowest k layers (adaptation extended toward the
    output as k grows). ``drop-shallow``: the deepest k layers (adaptation
    removed from the input side first as k shrinks).
    """
    n = len(norm_ids)
    if direction == "add-deep":
        return [list(norm_ids[:k]) for k in range(n + 1)]
    if direction == "drop-shallow":
        return [list(norm_ids[n - k:]) for k in range(n + 1)]
    raise ConfigError(f"unknown ablation direction {direction!r}; expected {DIRECTIONS}")


def layer_ablation(model, stream, direction="add-deep", cfg=AdaptConfig(), workers=1):
    if not isinstance(model, graph.ModelGraph):
        raise ConfigError("layer ablation needs a float model")
    norm_ids = model.norm_layer_ids()
    if not norm_ids:
        raise ConfigError("layer ablation needs at least one normalization layer")
    subsets = ablation_subsets(norm_ids, direction)
    mode = graph.Adapt(cfg)

    def run(subset):
        return evaluate_stream(graph.replace_norm_layers(model, subset), stream, mode).accuracy

    return AblationResult(direction, norm_ids, subsets, _map(run, subsets, workers))


def profile_ops(model, x, mode=graph.SOURCE):
    """Instrumented op counts of one forward pass."""
    counter = OpCounts()
    quant.run(model, np.asarray(x, dtype=np.float32), mode, counter=counter)
    return counter

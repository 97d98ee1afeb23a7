import sys

import numpy as np
import pytest

from leantta import _backend, graph, shift
from leantta.adapt import NormParams
from leantta.bench import data
from leantta.bench.train import TrainConfig, train_reference_model
from leantta.graph import LayerKind, LayerSpec, ModelGraph

# Fixed a priori for the desk-scale adaptation experiment; not tuned.
CLUSTER_ARGS = dict(num_classes=3, dim=8, separation=2.5, spread=1.0, seed=0)
N_TRAIN = 2000
N_HOLDOUT = 500
SHIFT_KINDS = ("mean-shift", "scale-shift")
PER_CELL = 40


@pytest.fixture(params=sorted(_backend.BACKENDS))
def backend(request):
    prev = _backend.NAME
    _backend.use(request.param)
    yield request.param
    _backend.use(prev)


def random_norm(rng, c, eps=1e-5):
    return NormParams(rng.normal(0, 1, c), rng.uniform(0.2, 2.0, c), rng.uniform(0.5, 1.5, c),
                      rng.normal(0, 0.5, c), eps=eps)


def random_cnn(seed=0, c_in=2, size=7, channels=(3, 4), classes=3, residual=False):
    """Untrained conv model with random weights and norm statistics."""
    rng = np.random.default_rng(seed)
    c1, c2 = channels
    layers = [
        LayerSpec.conv(rng.normal(0, 0.5, (c1, c_in, 3, 3)), rng.normal(0, 0.1, c1), 1, 1),
        LayerSpec.batch_norm(random_norm(rng, c1)),
        LayerSpec.marker(LayerKind.RELU),
    ]
    if residual:
        layers += [
            LayerSpec.marker(LayerKind.RESIDUAL_BEGIN),
            LayerSpec.conv(rng.normal(0, 0.3, (c1, c1, 3, 3)), rng.normal(0, 0.1, c1), 1, 1),
            LayerSpec.batch_norm(random_norm(rng, c1)),
            LayerSpec.marker(LayerKind.RESIDUAL_END),
        ]
    layers += [
        LayerSpec.conv(rng.normal(0, 0.5, (c2, c1, 3, 3)), rng.normal(0, 0.1, c2), 2, 1),
        LayerSpec.batch_norm(random_norm(rng, c2)),
        LayerSpec.marker(LayerKind.RELU),
        LayerSpec.marker(LayerKind.GLOBAL_AVG_POOL),
        LayerSpec.fc(rng.normal(0, 0.5, (classes, c2)), rng.normal(0, 0.1, classes)),
    ]
    return ModelGraph(tuple(layers), (c_in, size, size), classes, "random-cnn")


@pytest.fixture(scope="session")
def cluster_split():
    ds = data.gaussian_clusters(N_TRAIN + N_HOLDOUT, **CLUSTER_ARGS)
    return data.split(ds, N_HOLDOUT / (N_TRAIN + N_HOLDOUT), seed=0)


@pytest.fixture(scope="session")
def mlp(cluster_split):
    train, holdout = cluster_split
    return train_reference_model("mlp-bn", train, TrainConfig(seed=0), holdout)


@pytest.fixture(scope="session")
def shifted_stream(cluster_split):
    _, holdout = cluster_split
    return shift.build_stream(holdout, shift.StreamSpec("abrupt", PER_CELL, SHIFT_KINDS, seed=0))


@pytest.fixture(scope="session")
def clean_holdout_stream(cluster_split):
    _, holdout = cluster_split
    return shift.clean_stream(holdout, len(holdout), seed=0)


@pytest.fixture(scope="session")
def image_split():
    ds = data.pattern_images(1100, num_classes=3, size=8, seed=1)
    return data.split(ds, 500 / 1100, seed=1)


@pytest.fixture(scope="session")
def cnn(image_split):
    train, holdout = image_split
    return train_reference_model("tiny-cnn", train, TrainConfig(epochs=8, seed=0), holdout)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines):
        terminalreporter.write_line(line)
    passed = sum(" PASS " in line for line in lines)
    terminalreporter.write_line(f"{passed}/{len(lines)} criteria pass")

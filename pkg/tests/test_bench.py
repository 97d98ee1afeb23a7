import json

import numpy as np
import pytest
from sklearn.metrics import f1_score

from leantta import graph, quant, shift
from leantta.adapt import AdaptConfig
from leantta.bench import data, evaluate, experiments, metrics, report, train
from leantta.bench.evaluate import NaiveReplace, RunningAvg, SampleRecord
from leantta.errors import ConfigError, TrainingError
from leantta.profiling import OpCounts, adapt_extra_ops


# -- metrics -------------------------------------------------------------------------


def test_metric_examples():
    perfect = [(0, 0), (1, 1), (2, 2)]
    assert metrics.accuracy(perfect) == 1.0
    assert metrics.weighted_f1(perfect) == 1.0
    hand = list(zip([1, 1, 1, 0], [1, 1, 0, 0]))
    assert metrics.accuracy(hand) == 0.75
    assert metrics.weighted_f1(hand) == pytest.approx(0.75 * 0.8 + 0.25 * 2 / 3, abs=1e-12)
    one_class = [(y, 1) for y in [0, 1] * 10]
    assert metrics.weighted_f1(one_class) == pytest.approx(1 / 3, abs=1e-12)
    with pytest.raises(ConfigError):
        metrics.accuracy([])


def test_weighted_f1_matches_sklearn():
    rng = np.random.default_rng(0)
    for _ in range(20):
        y = rng.integers(0, 4, 50)
        p = np.where(rng.uniform(size=50) < 0.6, y, rng.integers(0, 5, 50))
        assert metrics.weighted_f1(list(zip(y, p))) == pytest.approx(f1_score(y, p, average="weighted"), abs=1e-12)


# -- trainer -------------------------------------------------------------------------


def _loss(layers, x, y):
    h = x
    for layer in layers:
        h = layer.forward(h, True)
    return train._softmax_xent(h, y)


@pytest.mark.parametrize("arch,shape", [("mlp-bn", (5,)), ("tiny-cnn", (2, 5, 5))])
def test_gradients_match_finite_differences(arch, shape):
    rng = np.random.default_rng(1)
    cfg = train.TrainConfig(hidden=6, channels=(3, 4))
    layers = train._build(arch, shape, 3, cfg, rng)
    for layer in layers:  # break the zero init of the output layer
        for v in layer.params.values():
            v += rng.normal(0, 0.3, v.shape)
    x = rng.normal(size=(6,) + shape)
    y = rng.integers(0, 3, 6)
    _, g = _loss(layers, x, y)
    for layer in reversed(layers):
        g = layer.backward(g)
    h = 1e-6
    for layer in layers:
        for name, p in layer.params.items():
            analytic = layer.grads[name].copy()
            for idx in list(np.ndindex(p.shape))[:6]:
                old = p[idx]
                p[idx] = old + h
                lp, _ = _loss(layers, x, y)
                p[idx] = old - h
                lm, _ = _loss(layers, x, y)
                p[idx] = old
                assert analytic[idx] == pytest.approx((lp - lm) / (2 * h), rel=1e-4, abs=1e-7)


def test_separable_blobs_reach_high_accuracy():
    ds = data.two_blobs(600, dim=2, gap=6.0, seed=3)
    tr, ho = data.split(ds, 0.25, seed=3)
    res = train.train_reference_model("mlp-bn", tr, train.TrainConfig(epochs=10, seed=0), ho)
    # closed-form classifier: the sign of the first coordinate
    oracle = np.mean((ho.inputs[:, 0] > 0).astype(int) == ho.labels)
    assert oracle >= 0.98
    assert res.holdout_accuracy >= 0.98
    assert res.losses[-1] < res.losses[0]


def test_zero_epochs_is_chance(cluster_split):
    tr, ho = cluster_split
    res = train.train_reference_model("mlp-bn", tr, train.TrainConfig(epochs=0), ho)
    assert abs(res.holdout_accuracy - 1 / 3) <= 0.1


def test_training_is_deterministic():
    ds = data.gaussian_clusters(200, 3, 4, seed=5)
    a = train.train_reference_model("mlp-bn", ds, train.TrainConfig(epochs=3, seed=7)).model
    b = train.train_reference_model("mlp-bn", ds, train.TrainConfig(epochs=3, seed=7)).model
    assert graph.encode_model(a) == graph.encode_model(b)


def test_exported_model_carries_running_stats(mlp):
    norms = [mlp.model.layers[i].norm for i in mlp.model.norm_layer_ids()]
    assert len(norms) == 2
    for p in norms:
        assert np.any(p.mu_s != 0) and np.any(p.sigma2_s != 1)


def test_training_errors():
    ds = data.gaussian_clusters(100, 3, 4, seed=5)
    with pytest.raises(TrainingError) as exc:
        train.train_reference_model("mlp-bn", ds, train.TrainConfig(epochs=3, lr=1e6))
    assert exc.value.epoch is not None
    with pytest.raises(ConfigError):
        train.train_reference_model("tiny-cnn", ds)
    with pytest.raises(ConfigError):
        train.train_reference_model("resnet", ds)
    with pytest.raises(ConfigError):
        train.TrainConfig(bn_momentum=1.5)
    with pytest.raises(ConfigError):
        train.TrainConfig(lr=0)


# -- evaluation ------------------------------------------------------------------------


def test_tau_one_equals_source(mlp, shifted_stream):
    m = graph.replace_norm_layers(mlp.model)
    src = evaluate.evaluate_stream(m, shifted_stream, graph.SOURCE)
    t1 = evaluate.evaluate_stream(m, shifted_stream, graph.Adapt(AdaptConfig(tau=1.0, lam=0.3)))
    assert src.predictions() == t1.predictions()
    assert src.accuracy == t1.accuracy


def test_naive_is_tau0_lambda0(mlp, shifted_stream):
    m = graph.replace_norm_layers(mlp.model)
    a = evaluate.evaluate_stream(m, shifted_stream, NaiveReplace())
    b = evaluate.evaluate_stream(m, shifted_stream, graph.Adapt(AdaptConfig(tau=0.0, lam=0.0)))
    assert a.predictions() == b.predictions()
    assert a.metadata["mode"] == "naive"


def test_adapt_predictions_invariant_to_permutation(mlp, shifted_stream):
    m = graph.replace_norm_layers(mlp.model)
    base = evaluate.evaluate_stream(m, shifted_stream, graph.Adapt()).predictions()
    perm = np.random.default_rng(0).permutation(len(shifted_stream))
    assert evaluate.evaluate_stream(m, shifted_stream.subset(perm), graph.Adapt()).predictions() == base


def test_running_avg_is_stateful_but_fresh_per_run(mlp, shifted_stream):
    m = graph.replace_norm_layers(mlp.model)
    mode = RunningAvg(0.9)
    a = evaluate.evaluate_stream(m, shifted_stream, mode)
    b = evaluate.evaluate_stream(m, shifted_stream, mode)
    assert a.predictions() == b.predictions()
    assert mode.state == {}
    x = shifted_stream.inputs[:1]
    ra = RunningAvg(0.5)
    first, _ = graph.forward(m, x, ra)
    second, _ = graph.forward(m, x, ra)
    assert first.tobytes() != second.tobytes()
    with pytest.raises(ConfigError):
        RunningAvg(2.0)


def test_engine_errors_recorded_per_sample():
    m = graph.ModelGraph((graph.LayerSpec.fc(np.full((3, 2), 1e30), np.zeros(3)),), (2,), 3)
    x = np.zeros((3, 2), np.float32)
    x[1, 0] = 1e20
    ds = shift.LabeledDataset(x, [0, 1, 2], 3)
    rep = evaluate.evaluate_stream(m, ds, graph.Adapt())
    assert rep.records[1].error.startswith("numeric")
    assert rep.records[0].error == "" and rep.records[2].error == ""
    assert rep.aggregate()["errors"] == 1


def test_trace_and_op_counts(mlp, shifted_stream):
    m = graph.replace_norm_layers(mlp.model)
    sub = shifted_stream.subset(np.arange(5))
    rep = evaluate.evaluate_stream(m, sub, graph.Adapt(), trace=True, count_ops=True)
    assert all(len(r.d) == 2 for r in rep.records)
    assert all(0.0 <= d < 1.0 for r in rep.records for d in r.d)
    assert rep.op_counts["float_mults"] > 0


def test_parse_mode():
    assert evaluate.parse_mode("source") is graph.SOURCE
    assert evaluate.parse_mode("adapt", 0.5, 0.2).cfg == AdaptConfig(tau=0.5, lam=0.2)
    assert isinstance(evaluate.parse_mode("running_avg"), RunningAvg)
    with pytest.raises(ConfigError):
        evaluate.parse_mode("tent")


# -- experiments ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_stream(shifted_stream):
    return shifted_stream.subset(np.arange(120))


def test_sweep_endpoint_and_structure(mlp, small_stream):
    m = graph.replace_norm_layers(mlp.model)
    src = evaluate.evaluate_stream(m, small_stream).accuracy
    one = experiments.sweep_hyperparams(m, small_stream, [1.0], [1.0])
    assert one.accuracy.shape == (1, 1) and one.cell(1.0, 1.0) == src
    grid = experiments.sweep_hyperparams(m, small_stream, [0.0, 0.5, 1.0, 1.0], [1.0, 0.0, 1.0])
    assert grid.taus == [0.0, 0.5, 1.0] and grid.lams == [0.0, 1.0]
    assert grid.cell(1.0, 1.0) == src
    assert ((grid.accuracy >= 0) & (grid.accuracy <= 1)).all()
    threaded = experiments.sweep_hyperparams(m, small_stream, [0.0, 0.5, 1.0], [0.0, 1.0], workers=3)
    np.testing.assert_array_equal(threaded.accuracy, grid.accuracy)
    assert grid.to_csv().splitlines()[0].startswith("tau")
    with pytest.raises(ConfigError):
        experiments.sweep_hyperparams(m, small_stream, [1.2], [0.5])


def test_default_grid_is_11_by_11():
    assert len(experiments.DEFAULT_GRID) == 11
    assert experiments.DEFAULT_GRID[0] == 0.0 and experiments.DEFAULT_GRID[-1] == 1.0


def test_ablation_subsets():
    ids = [1, 4, 7]
    assert experiments.ablation_subsets(ids, "add-deep") == [[], [1], [1, 4], [1, 4, 7]]
    assert experiments.ablation_subsets(ids, "drop-shallow") == [[], [7], [4, 7], [1, 4, 7]]
    with pytest.raises(ConfigError):
        experiments.ablation_subsets(ids, "sideways")


@pytest.mark.parametrize("direction", experiments.DIRECTIONS)
def test_ablation_endpoints(mlp, small_stream, direction):
    m = mlp.model
    res = experiments.layer_ablation(m, small_stream, direction)
    assert len(res.accuracy) == len(m.norm_layer_ids()) + 1
    src = evaluate.evaluate_stream(m, small_stream).accuracy
    full = evaluate.evaluate_stream(graph.replace_norm_layers(m), small_stream, graph.Adapt()).accuracy
    assert res.accuracy[0] == src
    assert res.accuracy[-1] == full


def test_profile_ops_adapt_budget(cnn):
    m = graph.replace_norm_layers(cnn.model)
    x = np.random.default_rng(0).uniform(size=(1,) + m.input_shape).astype(np.float32)
    src = experiments.profile_ops(m, x, graph.SOURCE)
    ada = experiments.profile_ops(m, x, graph.Adapt())
    assert experiments.profile_ops(m, x, graph.Adapt()) == ada
    expected = OpCounts()
    for i in m.norm_layer_ids():
        shape = (1,) + m.shapes[i - 1] if i else (1,) + m.input_shape
        fm, tr = adapt_extra_ops(int(np.prod(shape)), m.layers[i].norm.channels)
        expected.float_mults += fm
        expected.transcendentals += tr
    assert ada - src == expected


def test_profile_fusion_ordering(cnn, image_split):
    tr, _ = image_split
    m = cnn.model
    cal = quant.calibrate(m, tr.inputs, batches=4, batch_size=32)
    x = tr.inputs[:1]
    f = {}
    for policy in ("none", "deep-half", "all"):
        q = quant.quantize_model(m, quant.plan_partial_fusion(m, policy), cal)
        f[policy] = experiments.profile_ops(q, x, graph.Adapt()).float_mults
    assert f["all"] < f["deep-half"] < f["none"]


# -- reports ------------------------------------------------------------------------------


def make_report():
    recs = [SampleRecord(3, 1, 1, "mean-shift", 2, (0.25, 0.5)), SampleRecord(0, 0, 2, "identity", 0, (), ""),
            SampleRecord(7, 2, 2, "scale-shift", 5, (1 / 3,), "")]
    return evaluate.RunReport(recs, {"mode": "adapt", "tau": 0.9}, {"float_mults": 10}, 1.5)


@pytest.mark.parametrize("fmt", report.FORMATS)
def test_report_roundtrip(tmp_path, fmt):
    rep = make_report()
    path = report.emit_report(rep, fmt, tmp_path / f"r.{fmt}")
    back = report.read_report(path)
    assert back.accuracy == rep.accuracy
    assert back.weighted_f1 == rep.weighted_f1
    assert [r.d for r in back.records] == [r.d for r in rep.records]
    assert back.predictions() == rep.predictions()


def test_report_formats_agree_and_header_only(tmp_path):
    rep = make_report()
    csv_lines = report.render(rep, "csv").splitlines()
    jl = [json.loads(line) for line in report.render(rep, "jsonl").splitlines()]
    assert len(csv_lines) - 1 == sum(1 for o in jl if o["type"] == "sample") == 3
    assert jl[-1]["type"] == "aggregate" and jl[-1]["schema_version"] == 1
    assert "wall_time_s" not in jl[-1]
    assert "wall_time_s" in json.loads(report.render(rep, "jsonl", include_timing=True).splitlines()[-1])
    empty = evaluate.RunReport([])
    path = report.emit_report(empty, "csv", tmp_path / "e.csv")
    assert path.read_text() == ",".join(report.CSV_HEADER) + "\n"
    assert report.read_report(path).records == []
    with pytest.raises(ConfigError):
        report.render(rep, "xml")


def test_report_io_errors(tmp_path):
    with pytest.raises(OSError) as exc:
        report.emit_report(make_report(), "csv", tmp_path / "missing" / "r.csv")
    assert "missing" in str(exc.value)
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{nope\n")
    from leantta.errors import FormatError

    with pytest.raises(FormatError):
        report.read_report(bad)

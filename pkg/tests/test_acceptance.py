"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected and repeated in the terminal summary under
"acceptance criteria".
"""

import math
import time

import numpy as np
import pytest

from leantta import adapt, cli, graph, quant, shift
from leantta.adapt import AdaptConfig, NormParams
from leantta.bench import data, evaluate, experiments, metrics
from leantta.bench.train import TrainConfig, train_reference_model
from leantta.profiling import OpCounts

from conftest import CLUSTER_ARGS, N_HOLDOUT, N_TRAIN, PER_CELL, SHIFT_KINDS

RESULTS = []


def verdict(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# -- 1 ---------------------------------------------------------------------------------


def straight_line(x, mu_s, var_s, gamma, beta, tau, lam, eps, eps_inv):
    """Independent scalar implementation for one sample ``x`` of shape (C, S)."""
    c_count, s_count = len(x), len(x[0])
    mu_b, var_b = [0.0] * c_count, [0.0] * c_count
    m2 = 0.0
    for c in range(c_count):
        mean = sum(x[c]) / s_count
        var = sum((v - mean) ** 2 for v in x[c]) / s_count
        mu_b[c] = tau * mu_s[c] + (1 - tau) * mean
        var_b[c] = tau * var_s[c] + (1 - tau) * var
        m2 += (mu_b[c] - mu_s[c]) ** 2 / (var_s[c] + eps_inv)
    d = 1 - math.exp(-m2)
    out = []
    for c in range(c_count):
        mu_new = d * lam * mu_s[c] + (1 - d * lam) * mu_b[c]
        var_new = d * lam * var_s[c] + (1 - d * lam) * var_b[c]
        out.append([gamma[c] * (v - mu_new) / math.sqrt(var_new + eps) + beta[c] for v in x[c]])
    return out


def test_criterion_01_equation_oracle():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for case in range(1000):
        c = int(rng.integers(1, 5))
        rank4 = case % 2 == 0
        h, w = (int(rng.integers(1, 6)), int(rng.integers(1, 6))) if rank4 else (1, 1)
        x = rng.normal(rng.uniform(-1, 1), rng.uniform(0.2, 1.5), size=(1, c, h, w)).astype(np.float32)
        p = NormParams(rng.normal(0, 1, c), rng.uniform(0.3, 2.0, c), rng.uniform(0.5, 1.5, c),
                       rng.normal(0, 0.5, c), eps=float(rng.choice([1e-5, 1e-3])))
        tau, lam = float(rng.uniform()), float(rng.uniform())
        cfg = AdaptConfig(tau=tau, lam=lam)
        act = x if rank4 else x.reshape(1, c)
        y, _ = adapt.adaptive_normalize(act, p, cfg)
        cols = [[float(v) for v in x[0, ch].ravel()] for ch in range(c)]
        ref = straight_line(cols, [float(v) for v in p.mu_s], [float(v) for v in p.sigma2_s],
                            [float(v) for v in p.gamma], [float(v) for v in p.beta], tau, lam, p.eps, cfg.eps_inv)
        ref = np.array(ref).reshape(1, c, h, w)
        worst = max(worst, float(np.max(np.abs(y.reshape(ref.shape) - ref))))
    elapsed = time.perf_counter() - t0
    verdict(1, worst <= 1e-6 and elapsed < 10, f"max|diff|={worst:.3g} (<=1e-6) over 1000 cases in {elapsed:.2f}s (<10s)")


# -- 2 ---------------------------------------------------------------------------------


def test_criterion_02_statelessness(mlp, cluster_split):
    _, holdout = cluster_split
    t0 = time.perf_counter()
    stream = shift.build_stream(holdout, shift.StreamSpec("abrupt", 20, SHIFT_KINDS, seed=2))
    model = graph.replace_norm_layers(mlp.model)
    base = evaluate.evaluate_stream(model, stream, graph.Adapt()).predictions()
    rng = np.random.default_rng(2)
    same = 0
    for _ in range(5):
        perm = rng.permutation(len(stream))
        same += evaluate.evaluate_stream(model, stream.subset(perm), graph.Adapt()).predictions() == base
    elapsed = time.perf_counter() - t0
    verdict(2, len(stream) == 200 and same == 5 and elapsed < 30,
            f"{same}/5 permutations identical on {len(stream)} samples in {elapsed:.2f}s (<30s)")


# -- 3 ---------------------------------------------------------------------------------


def test_criterion_03_tau_one_noop(mlp, cnn):
    rng = np.random.default_rng(3)
    equal = total = 0
    for trained in (mlp, cnn):
        m = graph.replace_norm_layers(trained.model)
        for _ in range(50):
            x = rng.normal(0.5, 1.0, size=(1,) + m.input_shape).astype(np.float32)
            lam = float(rng.uniform())
            a, _ = graph.forward(m, x, graph.SOURCE)
            b, _ = graph.forward(m, x, graph.Adapt(AdaptConfig(tau=1.0, lam=lam)))
            equal += a.tobytes() == b.tobytes()
            total += 1
    verdict(3, equal == total == 100, f"{equal}/{total} logit vectors bitwise equal")


# -- 4 ---------------------------------------------------------------------------------


def test_criterion_04_divergence_closed_form():
    p = NormParams([0.0], [1.0], [1.0], [0.0])
    d1 = adapt.divergence(np.array([1.0]), p, eps_inv=1e-300)
    err1 = abs(d1 - (1 - math.exp(-1)))
    d0 = adapt.divergence(np.array([0.0]), p)
    rng = np.random.default_rng(4)

    def short(v, bits):
        # few-bit mantissas keep mu*k and (sd*k)**2 exact in float32 storage
        m, e = np.frexp(v)
        return np.ldexp(np.round(m * 2**bits) / 2**bits, e)

    worst = 0.0
    for _ in range(200):
        c = int(rng.integers(1, 8))
        mu_s, sd = short(rng.normal(size=c), 8), short(rng.uniform(0.7, 1.4, c), 4)
        k = short(rng.uniform(0.1, 10, c), 4)
        delta = rng.normal(size=c) * 0.3
        base = NormParams(mu_s, sd * sd, np.ones(c), np.zeros(c))
        scaled = NormParams(mu_s * k, (sd * k) ** 2, np.ones(c), np.zeros(c))
        a = adapt.divergence(mu_s + delta, base, eps_inv=1e-300)
        b = adapt.divergence(mu_s * k + delta * k, scaled, eps_inv=1e-300)
        worst = max(worst, abs(a - b))
    ok = err1 <= 1e-9 and d0 == 0.0 and worst <= 1e-12
    verdict(4, ok, f"|d(1)-(1-1/e)|={err1:.2g} (<=1e-9), d(0)={d0}, scale-invariance max diff={worst:.2g} (<=1e-12)")


# -- 5 ---------------------------------------------------------------------------------


def conv64(x, w, b, stride, pad):
    from numpy.lib.stride_tricks import sliding_window_view

    xp = np.pad(np.asarray(x, np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, w.shape[2:], axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("nchwij,ocij->nohw", win, np.asarray(w, np.float64)) + np.asarray(b, np.float64)[None, :, None, None]


def test_criterion_05_fusion_equivalence():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        c_in, c_out = int(rng.integers(1, 5)), int(rng.integers(1, 6))
        k = int(rng.choice([1, 3]))
        x = rng.normal(size=(1, c_in, 7, 7))
        w, b = rng.normal(size=(c_out, c_in, k, k)), rng.normal(size=c_out)
        bn = NormParams(rng.normal(size=c_out), rng.uniform(0.1, 3, c_out), rng.uniform(0.5, 1.5, c_out),
                        rng.normal(size=c_out))
        pre = conv64(x, w, b, 1, k // 2)
        s = bn.gamma.astype(np.float64) / np.sqrt(bn.sigma2_s.astype(np.float64) + bn.eps)
        composed = (pre - bn.mu_s.astype(np.float64)[None, :, None, None]) * s[None, :, None, None] \
            + bn.beta.astype(np.float64)[None, :, None, None]
        wf, bf = quant.fold_norm(w, b, bn)
        fused = conv64(x, wf, bf, 1, k // 2)
        worst = max(worst, float(np.max(np.abs(fused - composed) / (np.abs(composed) + 1e-6))))
    verdict(5, worst <= 1e-5, f"max relative |diff|={worst:.3g} (<=1e-5) over 100 conv+BN pairs")


# -- 6 ---------------------------------------------------------------------------------


def test_criterion_06_quantization(mlp, cnn, cluster_split, image_split):
    rng = np.random.default_rng(6)
    x = rng.uniform(-3, 5, 10**6)
    qp, _ = quant.activation_qparams(-3, 5)
    err = np.abs(quant.dequantize_tensor(quant.quantize_tensor(x, qp)) - x).max()
    bound_ok = err <= qp.scale / 2
    agreements = {}
    for name, trained, (tr, ho) in (("mlp-bn", mlp, cluster_split), ("tiny-cnn", cnn, image_split)):
        m = trained.model
        cal = quant.calibrate(m, tr.inputs, batches=20, batch_size=32)
        q = quant.quantize_model(m, quant.plan_partial_fusion(m, "all"), cal)
        hold = ho.inputs[:500]
        fp = graph.predict(m, hold)
        qp_, _ = quant.quantized_forward(q, hold)
        agreements[name] = float(np.mean(np.argmax(qp_, axis=1) == fp))
    ok = bound_ok and all(a >= 0.95 for a in agreements.values()) and len(hold) == 500
    verdict(6, ok, f"round-trip max err={err:.3g} (<= scale/2={qp.scale / 2:.3g}); top-1 agreement "
            + ", ".join(f"{k}={v:.3f}" for k, v in agreements.items()) + " (>=0.95)")


# -- 7, 9, 10 share the desk-scale experiment ---------------------------------------------


@pytest.fixture(scope="module")
def desk():
    t0 = time.perf_counter()
    ds = data.gaussian_clusters(N_TRAIN + N_HOLDOUT, **CLUSTER_ARGS)
    train, holdout = data.split(ds, N_HOLDOUT / (N_TRAIN + N_HOLDOUT), seed=0)
    model = train_reference_model("mlp-bn", train, TrainConfig(seed=0), holdout).model
    stream = shift.build_stream(holdout, shift.StreamSpec("abrupt", PER_CELL, SHIFT_KINDS, seed=0))
    clean = shift.clean_stream(holdout, len(holdout), seed=0)
    return dict(train=train, model=model, adaptive=graph.replace_norm_layers(model), stream=stream, clean=clean,
                setup_time=time.perf_counter() - t0)


def test_criterion_07_desk_scale_benefit(desk):
    t0 = time.perf_counter()
    m, s, c = desk["adaptive"], desk["stream"], desk["clean"]
    src = evaluate.evaluate_stream(m, s, graph.SOURCE).accuracy
    ada = evaluate.evaluate_stream(m, s, graph.Adapt(AdaptConfig(0.9, 0.9))).accuracy
    naive = evaluate.evaluate_stream(m, s, evaluate.NaiveReplace()).accuracy
    c_src = evaluate.evaluate_stream(m, c, graph.SOURCE).accuracy
    c_ada = evaluate.evaluate_stream(m, c, graph.Adapt(AdaptConfig(0.9, 0.9))).accuracy
    elapsed = time.perf_counter() - t0 + desk["setup_time"]
    a = ada >= src + 0.02
    b = naive <= ada
    cc = c_ada >= c_src - 0.005
    detail = (f"(a) adapt={ada:.4f} vs source={src:.4f} need +0.02 [{'ok' if a else 'miss'}]; "
              f"(b) naive={naive:.4f} <= adapt [{'ok' if b else 'miss'}]; "
              f"(c) clean adapt={c_ada:.4f} vs source={c_src:.4f} need >= -0.005 [{'ok' if cc else 'miss'}]; "
              f"n={len(s)}, {elapsed:.1f}s (<120s)")
    verdict(7, a and b and cc and elapsed < 120 and len(s) == 400, detail)


# -- 8 ---------------------------------------------------------------------------------


def test_criterion_08_ablation_endpoints(desk):
    m, s = desk["model"], desk["stream"]
    src = evaluate.evaluate_stream(m, s, graph.SOURCE).accuracy
    full = evaluate.evaluate_stream(desk["adaptive"], s, graph.Adapt()).accuracy
    curves = {d: experiments.layer_ablation(m, s, d) for d in experiments.DIRECTIONS}
    n = len(m.norm_layer_ids()) + 1
    ok = all(len(r.accuracy) == n and r.accuracy[0] == src for r in curves.values())
    ok = ok and curves["add-deep"].accuracy[-1] == full
    verdict(8, ok, "; ".join(f"{d}: " + " ".join(f"{a:.4f}" for a in r.accuracy) for d, r in curves.items())
            + f" (source={src:.4f}, full adapt={full:.4f})")


# -- 9 ---------------------------------------------------------------------------------


def test_criterion_09_partial_fusion(cnn, image_split, desk):
    tr, _ = image_split
    m = cnn.model
    cal = quant.calibrate(m, tr.inputs, batches=20, batch_size=32)
    x = tr.inputs[:1]
    counts = {}
    for policy in ("none", "deep-half", "all"):
        q = quant.quantize_model(m, quant.plan_partial_fusion(m, policy), cal)
        c = OpCounts()
        quant.quantized_forward(q, x, graph.Adapt(), counter=c)
        counts[policy] = c.float_mults
    order_ok = counts["none"] > counts["deep-half"] > counts["all"]

    mm = desk["model"]
    qcal = quant.calibrate(mm, desk["train"].inputs, batches=20, batch_size=32)
    qm = quant.quantize_model(mm, quant.plan_partial_fusion(mm, "deep-half"), qcal)
    q_src = evaluate.evaluate_stream(qm, desk["stream"], graph.SOURCE)
    q_ada = evaluate.evaluate_stream(qm, desk["stream"], graph.Adapt())
    completed = not any(r.error for r in q_ada.records)
    gain_ok = q_ada.accuracy >= q_src.accuracy + 0.01
    verdict(9, order_ok and completed and gain_ok,
            f"float mults none={counts['none']} > deep-half={counts['deep-half']} > all={counts['all']} "
            f"[{'ok' if order_ok else 'miss'}]; quantized deep-half adapt={q_ada.accuracy:.4f} vs "
            f"source={q_src.accuracy:.4f} need +0.01 [{'ok' if gain_ok else 'miss'}]")


# -- 10 --------------------------------------------------------------------------------


def test_criterion_10_sweep(desk):
    m, s = desk["adaptive"], desk["stream"]
    src = evaluate.evaluate_stream(m, s, graph.SOURCE).accuracy
    t0 = time.perf_counter()
    res = experiments.sweep_hyperparams(m, s)
    elapsed = time.perf_counter() - t0
    ok = res.accuracy.shape == (11, 11) and res.cell(1.0, 1.0) == src and elapsed < 600
    verdict(10, ok, f"cell(1,1)={res.cell(1.0, 1.0):.4f} vs source={src:.4f}; 11x11 grid in {elapsed:.1f}s (<600s); "
            f"grid range {res.accuracy.min():.4f}..{res.accuracy.max():.4f}")


# -- 11 --------------------------------------------------------------------------------


def test_criterion_11_metric_oracle():
    f1 = metrics.weighted_f1(list(zip([1, 1, 1, 0], [1, 1, 0, 0])))
    verdict(11, abs(f1 - 0.76667) <= 1e-5, f"weighted F1={f1:.6f} (0.76667 +- 1e-5)")


# -- 12 --------------------------------------------------------------------------------


def _pipeline(d):
    steps = [
        ["--seed", "12", "synth", "--n", "800", "--out", d / "data.lttd"],
        ["--seed", "12", "train", "--data", d / "data.lttd", "--epochs", "8", "--out", d / "model.ltta"],
        ["--seed", "12", "corrupt", "--kind", "scale-shift", "--severity", "3", "--in", d / "data.lttd",
         "--out", d / "shifted.lttd"],
        ["--seed", "12", "stream", "abrupt", "--in", d / "data.lttd", "--per-cell", "20", "--out", d / "stream.lttd"],
        ["--seed", "12", "eval", "--model", d / "model.ltta", "--stream", d / "stream.lttd", "--mode", "adapt",
         "--trace", "--count-ops", "--out", d / "report.jsonl"],
        ["--seed", "12", "eval", "--model", d / "model.ltta", "--stream", d / "shifted.lttd", "--mode", "source",
         "--out", d / "report.csv"],
    ]
    for argv in steps:
        code = cli.run([str(a) for a in argv])
        assert code == 0, argv


def test_criterion_12_cli_determinism(tmp_path, capsys):
    runs = []
    for name in ("first", "second"):
        d = tmp_path / name
        d.mkdir()
        _pipeline(d)
        runs.append(d)
    capsys.readouterr()
    names = ("report.jsonl", "report.csv")
    same = [(runs[0] / n).read_bytes() == (runs[1] / n).read_bytes() for n in names]
    verdict(12, all(same), ", ".join(f"{n} identical={s}" for n, s in zip(names, same)))

"""Command-line frontend: ``leantta <subcommand> [flags]``.

Exit codes: 0 success, 1 unexpected failure, 2 usage or configuration error,
3 file or format error, 4 numeric error. Failures print one line
``error[<category>]: <message>`` to stderr.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from leantta import __version__, graph, quant, shift
from leantta.adapt import DISTANCE_MODES, AdaptConfig
from leantta.bench import data as bdata
from leantta.bench import evaluate, experiments, report
from leantta.bench.train import ARCHS, TrainConfig, train_reference_model
from leantta.errors import ConfigError, FormatError, LeanTTAError, NumericError

log = logging.getLogger("leantta")

EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_FILE, EXIT_NUMERIC = 0, 1, 2, 3, 4
DEFAULT_TAU = 0.9
DEFAULT_LAMBDA = 0.9
DEFAULT_FUSION = "deep-half"
MODES = ("source", "adapt", "naive", "running-avg")
SYNTH_KINDS = ("clusters", "blobs", "patterns")
CORRUPTIONS = tuple(c.value for c in shift.Corruption)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


class _Fmt(argparse.ArgumentDefaultsHelpFormatter):
    pass


def _unit(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is outside [0, 1]")
    return v


def _grid(text):
    try:
        return [_unit(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}") from None


def _globals(defaults):
    p = argparse.ArgumentParser(add_help=False)
    kw = {} if defaults else {"default": argparse.SUPPRESS}
    p.add_argument("--seed", type=int, help="seed for every random draw", **({"default": 0} if defaults else kw))
    p.add_argument("--threads", type=int, help="parallel sweep/ablation workers",
                   **({"default": 1} if defaults else kw))
    p.add_argument("--log-level", choices=("debug", "info", "warning", "error"),
                   help="log verbosity (LEANTTA_LOG overrides)", **({"default": "warning"} if defaults else kw))
    return p


def _mode_flags(p, modes=True):
    if modes:
        p.add_argument("--mode", choices=MODES, default="source", help="normalization mode")
    p.add_argument("--tau", type=_unit, default=DEFAULT_TAU, help="source weight tau")
    p.add_argument("--lambda", dest="lam", type=_unit, default=DEFAULT_LAMBDA, help="distance scaler lambda")
    p.add_argument("--distance-mode", choices=DISTANCE_MODES, default="raw", help="Mahalanobis reduction")
    if modes:
        p.add_argument("--momentum", type=_unit, default=0.9, help="running-avg baseline momentum")


def build_parser():
    parser = _Parser(prog="leantta", description="Per-sample normalization adaptation toolkit.",
                     formatter_class=_Fmt, parents=[_globals(True)])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = [_globals(False)]

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, description=help_text, formatter_class=_Fmt, parents=common)

    p = add("synth", "generate a synthetic labeled dataset")
    p.add_argument("--kind", choices=SYNTH_KINDS, default="clusters", help="dataset family")
    p.add_argument("--n", type=int, default=2000, help="number of samples")
    p.add_argument("--classes", type=int, default=3, help="number of classes")
    p.add_argument("--dim", type=int, default=8, help="feature dimension (clusters, blobs)")
    p.add_argument("--separation", type=float, default=2.5, help="class-mean radius (clusters)")
    p.add_argument("--size", type=int, default=8, help="image side (patterns)")
    p.add_argument("--out", required=True, help="output dataset file")

    p = add("train", "train a reference model with batch normalization")
    p.add_argument("--arch", choices=ARCHS, default="mlp-bn", help="architecture")
    p.add_argument("--data", required=True, help="training dataset file")
    p.add_argument("--holdout-fraction", type=float, default=0.2, help="clean holdout share")
    p.add_argument("--epochs", type=int, default=20, help="training epochs")
    p.add_argument("--lr", type=float, default=0.05, help="learning rate")
    p.add_argument("--batch-size", type=int, default=32, help="mini-batch size")
    p.add_argument("--bn-momentum", type=_unit, default=0.9, help="running-statistics momentum")
    p.add_argument("--out", required=True, help="output model file")

    p = add("corrupt", "apply one corruption to every sample")
    p.add_argument("--kind", choices=CORRUPTIONS, required=True, help="corruption kind")
    p.add_argument("--severity", type=int, choices=range(1, 6), default=3, help="severity 1..5")
    p.add_argument("--in", dest="inp", required=True, help="input dataset file")
    p.add_argument("--out", required=True, help="output dataset file")

    p = add("stream", "build an abrupt or gradual shifted test stream")
    p.add_argument("order", choices=[m.value for m in shift.StreamMode], help="stream ordering")
    p.add_argument("--in", dest="inp", required=True, help="clean base dataset file")
    p.add_argument("--kinds", default="mean-shift,scale-shift", help="comma-separated corruption kinds")
    p.add_argument("--per-cell", type=int, default=40, help="samples per (kind, severity) cell K")
    p.add_argument("--out", required=True, help="output stream file")

    p = add("calibrate", "collect activation ranges for int8 quantization")
    p.add_argument("--model", required=True, help="float model file")
    p.add_argument("--data", required=True, help="calibration dataset file")
    p.add_argument("--batches", type=int, default=20, help="calibration batches")
    p.add_argument("--batch-size", type=int, default=32, help="calibration batch size")
    p.add_argument("--out", required=True, help="output calibration JSON")

    p = add("quantize", "fuse and quantize a float model to int8")
    p.add_argument("--model", required=True, help="float model file")
    p.add_argument("--calib", required=True, help="calibration JSON")
    p.add_argument("--fusion", default=DEFAULT_FUSION, help="all | none | deep-half | explicit:<ids>")
    p.add_argument("--out", required=True, help="output quantized model file")

    p = add("eval", "evaluate a model on a stream at batch size 1")
    p.add_argument("--model", required=True, help="float or quantized model file")
    p.add_argument("--stream", required=True, help="stream or dataset file")
    _mode_flags(p)
    p.add_argument("--trace", action="store_true", help="record per-layer divergence d")
    p.add_argument("--count-ops", action="store_true", help="add instrumented op counts")
    p.add_argument("--timing", action="store_true", help="write wall time into the report")
    p.add_argument("--format", choices=report.FORMATS, help="report format (default from --out suffix)")
    p.add_argument("--out", required=True, help="output report file")

    p = add("sweep", "grid search over tau and lambda")
    p.add_argument("--model", required=True, help="float or quantized model file")
    p.add_argument("--stream", required=True, help="stream file")
    p.add_argument("--tau-grid", type=_grid, default=list(experiments.DEFAULT_GRID), help="comma-separated taus")
    p.add_argument("--lambda-grid", type=_grid, default=list(experiments.DEFAULT_GRID),
                   help="comma-separated lambdas")
    p.add_argument("--distance-mode", choices=DISTANCE_MODES, default="raw", help="Mahalanobis reduction")
    p.add_argument("--out", required=True, help="output CSV matrix")

    p = add("ablate", "accuracy as adaptation is restricted to layer subsets")
    p.add_argument("--model", required=True, help="float model file")
    p.add_argument("--stream", required=True, help="stream file")
    p.add_argument("--direction", choices=experiments.DIRECTIONS, default="add-deep", help="subset order")
    _mode_flags(p, modes=False)
    p.add_argument("--out", required=True, help="output CSV curve")

    p = add("profile", "instrumented op counts of one forward pass")
    p.add_argument("--model", required=True, help="float or quantized model file")
    p.add_argument("--data", required=True, help="dataset file supplying the input")
    p.add_argument("--index", type=int, default=0, help="sample index")
    _mode_flags(p)
    p.add_argument("--out", help="output JSON (stdout if omitted)")

    p = add("report", "summarize or convert a report file")
    p.add_argument("--in", dest="inp", required=True, help="report file (csv or jsonl)")
    p.add_argument("--format", choices=report.FORMATS, help="conversion format")
    p.add_argument("--out", help="converted report file")
    return parser


# -- helpers ------------------------------------------------------------------------


def _inputs(args):
    return [Path(getattr(args, k)) for k in ("data", "inp", "model", "stream", "calib") if getattr(args, k, None)]


def _check_out(args, out):
    out = Path(out)
    for src in _inputs(args):
        if src.exists() and out.exists() and out.resolve() == src.resolve():
            raise ConfigError(f"output {out} would overwrite input file {src}")
    return out


def resolved_config(args):
    """Flags as recorded in report metadata; file paths reduced to their names."""
    cfg = {}
    for k, v in sorted(vars(args).items()):
        if k in ("out", "timing"):
            continue
        if k in ("data", "inp", "model", "stream", "calib") and v is not None:
            v = Path(v).name
        cfg[k] = v
    return cfg


def _mode(args):
    return evaluate.parse_mode(args.mode, args.tau, args.lam, args.distance_mode, args.momentum)


def _load_model(path):
    model = quant.load_any(path)
    return evaluate.ensure_adaptive(model)


def _write_text(path, text):
    graph.atomic_write(path, text.encode("utf-8"))


# -- subcommands ----------------------------------------------------------------------


def cmd_synth(args):
    if args.kind == "clusters":
        ds = bdata.gaussian_clusters(args.n, args.classes, args.dim, args.separation, seed=args.seed)
    elif args.kind == "blobs":
        ds = bdata.two_blobs(args.n, args.dim, seed=args.seed)
    else:
        ds = bdata.pattern_images(args.n, args.classes, size=args.size, seed=args.seed)
    shift.save_dataset(ds, _check_out(args, args.out))
    log.info("wrote %d samples of shape %s", len(ds), ds.sample_shape)


def cmd_train(args):
    ds = shift.load_dataset(args.data)
    train, holdout = bdata.split(ds, args.holdout_fraction, seed=args.seed)
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                      bn_momentum=args.bn_momentum, seed=args.seed)
    res = train_reference_model(args.arch, train, cfg, holdout if len(holdout) else None, name=args.arch)
    graph.save_model(res.model, _check_out(args, args.out))
    print(f"holdout_accuracy={res.holdout_accuracy!r}")


def cmd_corrupt(args):
    ds = shift.load_dataset(args.inp)
    out = shift.corrupt_dataset(ds, shift.ShiftSpec(args.kind, args.severity), args.seed)
    shift.save_dataset(out, _check_out(args, args.out))


def cmd_stream(args):
    base = shift.load_dataset(args.inp)
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    try:
        spec = shift.StreamSpec(args.order, args.per_cell, kinds, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    s = shift.build_stream(base, spec)
    shift.save_dataset(s, _check_out(args, args.out))
    log.info("%s stream of %d samples", args.order, len(s))


def cmd_calibrate(args):
    model = graph.load_model(args.model)
    ds = shift.load_dataset(args.data)
    calib = quant.calibrate(model, ds.inputs, args.batches, args.batch_size)
    _write_text(_check_out(args, args.out), calib.to_json() + "\n")


def cmd_quantize(args):
    model = graph.load_model(args.model)
    calib = quant.Calibration.from_json(Path(args.calib).read_text(encoding="utf-8"))
    plan = quant.plan_partial_fusion(model, args.fusion)
    log.warning("fusion plan %s: %d unfused norm layers", plan.describe(), len(plan.unfused))
    qmodel = quant.quantize_model(model, plan, calib)
    quant.save_quantized_model(qmodel, _check_out(args, args.out))
    print(f"unfused={list(plan.unfused)} fused={list(plan.fused)}")


def cmd_eval(args):
    model = _load_model(args.model)
    stream = shift.load_dataset(args.stream)
    rep = evaluate.evaluate_stream(model, stream, _mode(args), trace=args.trace, count_ops=args.count_ops)
    rep.metadata["config"] = resolved_config(args)
    fmt = args.format or ("csv" if Path(args.out).suffix == ".csv" else "jsonl")
    report.emit_report(rep, fmt, _check_out(args, args.out), include_timing=args.timing)
    print(f"accuracy={rep.accuracy!r} weighted_f1={rep.weighted_f1!r} n={len(rep.records)}")


def cmd_sweep(args):
    model = _load_model(args.model)
    stream = shift.load_dataset(args.stream)
    res = experiments.sweep_hyperparams(model, stream, args.tau_grid, args.lambda_grid,
                                        args.distance_mode, workers=args.threads)
    _write_text(_check_out(args, args.out), res.to_csv())
    best = np.unravel_index(np.argmax(res.accuracy), res.accuracy.shape)
    print(f"cells={res.accuracy.size} best_tau={res.taus[best[0]]} best_lambda={res.lams[best[1]]} "
          f"best_accuracy={float(res.accuracy[best])!r}")


def cmd_ablate(args):
    model = graph.load_model(args.model)
    stream = shift.load_dataset(args.stream)
    cfg = AdaptConfig(tau=args.tau, lam=args.lam, distance_mode=args.distance_mode)
    res = experiments.layer_ablation(model, stream, args.direction, cfg, workers=args.threads)
    _write_text(_check_out(args, args.out), res.to_csv())
    print(" ".join(f"{a:.4f}" for a in res.accuracy))


def cmd_profile(args):
    model = _load_model(args.model)
    ds = shift.load_dataset(args.data)
    if not 0 <= args.index < len(ds):
        raise ConfigError(f"sample index {args.index} outside [0, {len(ds)})")
    counts = experiments.profile_ops(model, ds.inputs[args.index:args.index + 1], _mode(args))
    text = json.dumps({"config": resolved_config(args), "op_counts": counts.as_dict()}, sort_keys=True)
    if args.out:
        _write_text(_check_out(args, args.out), text + "\n")
    else:
        print(text)


def cmd_report(args):
    rep = report.read_report(args.inp)
    agg = rep.aggregate()
    print(" ".join(f"{k}={agg[k]!r}" for k in sorted(agg)))
    if args.out:
        fmt = args.format or ("csv" if Path(args.out).suffix == ".csv" else "jsonl")
        report.emit_report(rep, fmt, _check_out(args, args.out))


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "corrupt": cmd_corrupt, "stream": cmd_stream,
    "calibrate": cmd_calibrate, "quantize": cmd_quantize, "eval": cmd_eval, "sweep": cmd_sweep,
    "ablate": cmd_ablate, "profile": cmd_profile, "report": cmd_report,
}


def _setup_logging(level):
    level = os.environ.get("LEANTTA_LOG", level).upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR"):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def _fail(category, message, code):
    print(f"error[{category}]: {message}", file=sys.stderr)
    return code


def run(argv=None):
    """Parse ``argv`` and execute one subcommand; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail("usage", exc, EXIT_USAGE)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    _setup_logging(args.log_level)
    if args.threads < 1:
        return _fail("usage", "--threads must be >= 1", EXIT_USAGE)
    try:
        COMMANDS[args.command](args)
    except FormatError as exc:
        return _fail(exc.category, exc, EXIT_FILE)
    except OSError as exc:
        return _fail("file", f"{exc.filename or ''}: {exc.strerror or exc}".lstrip(": "), EXIT_FILE)
    except NumericError as exc:
        return _fail(exc.category, exc, EXIT_NUMERIC)
    except LeanTTAError as exc:
        return _fail(exc.category, exc, EXIT_USAGE)
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        log.debug("unexpected failure", exc_info=True)
        return _fail("internal", f"{type(exc).__name__}: {exc}", EXIT_OTHER)
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

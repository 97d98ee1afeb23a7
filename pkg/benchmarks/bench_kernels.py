"""Compare the compiled kernels with the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--json PATH]

Shapes match single-sample inference on the reference models (batch size 1),
which is the regime the adaptation engine runs in.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from leantta import _backend

CASES = {
    "conv2d_f32 1x8x8x8 k3": "conv_f",
    "conv2d_q 1x8x8x8 k3": "conv_q",
    "linear_f32 1x64->32": "lin_f",
    "linear_q 1x64->32": "lin_q",
}


def make_inputs(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 8, 8, 8)).astype(np.float32)
    w = rng.normal(size=(8, 8, 3, 3)).astype(np.float32)
    b = rng.normal(size=8).astype(np.float32)
    xq = rng.integers(0, 256, size=x.shape, dtype=np.uint8)
    wq = rng.integers(-127, 128, size=w.shape, dtype=np.int8)
    bq = rng.integers(-1000, 1000, size=8, dtype=np.int32)
    v = rng.normal(size=(1, 64)).astype(np.float32)
    m = rng.normal(size=(32, 64)).astype(np.float32)
    mb = rng.normal(size=32).astype(np.float32)
    vq = rng.integers(0, 256, size=v.shape, dtype=np.uint8)
    mq = rng.integers(-127, 128, size=m.shape, dtype=np.int8)
    mbq = rng.integers(-1000, 1000, size=32, dtype=np.int32)
    return {
        "conv_f": lambda k: k.conv2d_f32(x, w, b, 1, 1),
        "conv_q": lambda k: k.conv2d_q(xq, 128, wq, bq, 1, 1),
        "lin_f": lambda k: k.linear_f32(v, m, mb),
        "lin_q": lambda k: k.linear_q(vq, 128, mq, mbq),
    }


def bench(repeat=200):
    calls = make_inputs()
    rows = []
    for label, key in CASES.items():
        row = {"kernel": label}
        outputs = {}
        for name, mod in sorted(_backend.BACKENDS.items()):
            fn = calls[key]
            outputs[name] = fn(mod)
            t = min(timeit.repeat(lambda: fn(mod), number=repeat, repeat=3)) / repeat
            row[f"{name}_us"] = t * 1e6
        ref = outputs["python"]
        row["agree"] = all(np.allclose(o, ref, rtol=1e-5, atol=1e-4) for o in outputs.values())
        if "cython_us" in row:
            row["speedup"] = row["python_us"] / row["cython_us"]
        rows.append(row)
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    if "cython" not in _backend.BACKENDS:
        print("compiled extension not built; only the fallback is timed", file=sys.stderr)
    rows = bench(args.repeat)
    print(f"{'kernel':26s} {'python us':>10s} {'cython us':>10s} {'speedup':>8s}  agree")
    for r in rows:
        print(f"{r['kernel']:26s} {r['python_us']:10.1f} {r.get('cython_us', float('nan')):10.1f} "
              f"{r.get('speedup', float('nan')):8.2f}  {r['agree']}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())

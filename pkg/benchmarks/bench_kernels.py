"""Compiled vs numpy kernels on desk-scale shapes.

    python benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Prints the best-of-N wall time per kernel and backend, the speed-up, and the
max abs difference between the two backends' outputs.
"""

import argparse
import json
import time

import numpy as np

from spisr import _fallback
from spisr._backend import get

# (label, Cin, Cout, padded grid) for the stride-1 convolutions of the default network
CONV_CASES = [
    ("feat0 LR 1->16", 1, 16, (34, 18, 18)),
    ("feat1 LR 16->16", 16, 16, (34, 18, 18)),
    ("head HR 16->1", 16, 1, (66, 34, 34)),
]


def best_of(fn, repeat):
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(rng):
    for label, cin, cout, padded in CONV_CASES:
        x = rng.standard_normal((cin, int(np.prod(padded))))
        w = rng.standard_normal((cout, cin, 3, 3, 3))
        g = rng.standard_normal((cout, _fallback._wide_len(x.shape[1], (3, 3, 3), padded)))
        yield f"conv fwd   {label}", lambda m, x=x, w=w, p=padded: m.conv3d_forward(x, w, p)
        yield f"conv dx    {label}", lambda m, g=g, w=w, p=padded: m.conv3d_backward_input(g, w, p)
        yield f"conv dw    {label}", lambda m, g=g, x=x, p=padded: m.conv3d_backward_weight(g, x, (3, 3, 3), p)
    v = rng.standard_normal(16 * 64 * 32 * 32) * 3
    yield "softplus   16x64x32x32", lambda m, v=v: m.softplus(v)
    lam_small = rng.uniform(0, 20, 200_000)
    lam_large = rng.uniform(30, 3000, 200_000)
    yield "poisson    rate<30  2e5", lambda m, lam=lam_small: m.poisson(lam, 12345, 30.0)
    yield "poisson    rate>=30 2e5", lambda m, lam=lam_large: m.poisson(lam, 12345, 30.0)
    yield "uniforms   1e6", lambda m: m.uniforms(7, 1_000_000)


def _maxdiff(a, b):
    if isinstance(a, tuple):
        return max(_maxdiff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)
    compiled, python = get("compiled"), get("python")
    rows = []
    print(f"{'kernel':34s} {'compiled ms':>12s} {'numpy ms':>10s} {'speed-up':>9s} {'max |diff|':>11s}")
    for name, fn in cases(np.random.default_rng(0)):
        tc, oc = best_of(lambda: fn(compiled), args.repeat)
        tp, op = best_of(lambda: fn(python), args.repeat)
        diff = _maxdiff(oc, op)
        rows.append({"kernel": name, "compiled_ms": 1e3 * tc, "numpy_ms": 1e3 * tp, "max_abs_diff": diff})
        print(f"{name:34s} {1e3 * tc:12.2f} {1e3 * tp:10.2f} {tp / tc:8.1f}x {diff:11.2e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()

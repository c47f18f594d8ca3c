"""Time the compiled and numpy kernel backends on the default layer shapes.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--csv out.csv]

Each row reports the best wall time over ``--repeat`` runs for one kernel
and backend, plus the speedup of the compiled backend over numpy. Results
from the two backends are checked against each other before timing.
"""

import argparse
import csv
import sys
import timeit

import numpy as np

from dsa3d import _backend
from dsa3d.nnops import (KernelBank, conv3d_backward, conv3d_forward, maxpool3d_backward,
                         maxpool3d_forward)

# (label, input shape, maps, kernel) for the three default encoder stages
CONV_CASES = [
    ("conv 1->8 @32^3", (1, 32, 32, 32), 8, 3),
    ("conv 8->16 @16^3", (8, 16, 16, 16), 16, 3),
    ("conv 16->32 @8^3", (16, 8, 8, 8), 32, 3),
]
POOL_CASES = [("pool 2 on 8x32^3", (8, 32, 32, 32), 2)]


def _cases(rng):
    for label, shape, maps, n in CONV_CASES:
        x = rng.standard_normal(shape)
        k = KernelBank(0.1 * rng.standard_normal((maps, shape[0], n, n, n)),
                       0.1 * rng.standard_normal(maps))
        up = rng.standard_normal((maps,) + shape[1:])
        yield (label + " fwd", lambda b, x=x, k=k: conv3d_forward(x, k, "relu", "same", b))
        out = conv3d_forward(x, k, "relu")
        yield (label + " bwd", lambda b, x=x, k=k, up=up, out=out:
               conv3d_backward(x, k, "relu", "same", up, out=out, backend=b))
    for label, shape, s in POOL_CASES:
        x = rng.standard_normal(shape)
        rec = maxpool3d_forward(x, s)
        up = rng.standard_normal(rec.output.shape)
        yield (label + " fwd", lambda b, x=x, s=s: maxpool3d_forward(x, s, b))
        yield (label + " bwd", lambda b, rec=rec, up=up: maxpool3d_backward(rec, up, b))


def _flatten(res):
    if hasattr(res, "output"):
        return [res.output, res.argmax]
    if isinstance(res, tuple):
        return [r for r in res if r is not None]
    return [res]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--csv", help="also write the table to this file")
    args = ap.parse_args(argv)

    backends = _backend.available_backends()
    if "cython" not in backends:
        print("compiled backend not built; timing numpy only", file=sys.stderr)
    rows = []
    for label, fn in _cases(np.random.default_rng(0)):
        results = {b: _flatten(fn(b)) for b in backends}
        ref = results["python"]
        for b in backends:
            for got, want in zip(results[b], ref):
                np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9)
        times = {b: min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat))
                 for b in backends}
        speedup = times["python"] / times["cython"] if "cython" in times else float("nan")
        rows.append((label, times.get("cython", float("nan")), times["python"], speedup))

    print(f"{'kernel':28s} {'cython ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for label, tc, tp, sp in rows:
        print(f"{label:28s} {1e3 * tc:10.2f} {1e3 * tp:10.2f} {sp:8.2f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("kernel", "cython_s", "numpy_s", "speedup"))
            w.writerows(rows)


if __name__ == "__main__":
    main()

"""Time the segment kernels under the numba and numpy backends.

Usage: python benchmarks/bench_kernels.py [--nodes 2000] [--degree 12] [--width 128] [--repeats 20]

Prints one JSON object: per kernel and backend, the median seconds per call
and the numba speedup. The index layout mimics a batch of crystal graphs,
with every node owning ``degree`` consecutive edges.
"""
import argparse
import json
import statistics
import time

import numpy as np

from xtal2dos import kernels


def timed(fn, repeats):
    fn()  # warm-up, also triggers numba compilation
    out = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        out.append(time.perf_counter() - start)
    return statistics.median(out)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=2000)
    ap.add_argument("--degree", type=int, default=12)
    ap.add_argument("--width", type=int, default=128)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    n, e = args.nodes, args.nodes * args.degree
    index = np.repeat(np.arange(n), args.degree).astype(np.int64)
    values = rng.standard_normal((e, args.width))
    logits = rng.standard_normal((e, args.heads))
    probs = kernels.segment_softmax(logits, index, n)
    grad = rng.standard_normal((e, args.heads))
    cases = {
        "scatter_add_rows": lambda: kernels.scatter_add_rows(values, index, n),
        "segment_max": lambda: kernels.segment_max(logits, index, n),
        "segment_softmax": lambda: kernels.segment_softmax(logits, index, n),
        "segment_softmax_backward": lambda: kernels.segment_softmax_backward(probs, grad, index, n),
    }
    start_backend = kernels.backend()
    results = {}
    try:
        for name, fn in cases.items():
            row = {}
            for be in ("numpy", "numba"):
                kernels.set_backend(be)
                row[be] = timed(fn, args.repeats)
            row["speedup"] = row["numpy"] / row["numba"]
            results[name] = row
    finally:
        kernels.set_backend(start_backend)
    print(json.dumps({"nodes": n, "edges": e, "width": args.width, "heads": args.heads, "kernels": results},
                     indent=2))


if __name__ == "__main__":
    main()
